//! Parametric sparse-factorization attention: per-row MLPs emit the
//! non-zeros of each Chord factor from the current embedding, the chain is
//! applied to a value matrix, and the whole composite trains end to end.
//!
//! Slot `0` of a factor-MLP output is the diagonal entry of that row; slot
//! `c >= 1` lands on column `(i + 2^(c-1)) mod N` (the pattern's offset
//! order). Backprop through the chain uses
//! `dW_m[i,j] = sum_c G_m[i,c] * Y_{m+1}[j,c]` and `G_{m+1} = W_m^T G_m`,
//! where `Y_m` is the partial product `W_m ... W_M V`.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chord::{build_pattern, PatternMode, SparsityPattern};
use crate::data::{AddingInstance, OrderInstance, ORDER_VOCAB};
use crate::error::{Result, SfError};
use crate::matrix::{
    row_of_product, spmm_dense, spmm_transpose_dense, DenseMatrix, FactorChain,
    SparseSquareMatrix,
};
use crate::nn::{adam_step, AdamHyper, AdamState, Activation, Mlp, MlpTrace};

/// Which synthetic task a model is wired for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Adding,
    TemporalOrder,
}

impl Task {
    pub fn output_dim(self) -> usize {
        match self {
            Task::Adding => 1,
            Task::TemporalOrder => 4,
        }
    }
}

/// First stage: raw sequence to an N x d embedding.
#[derive(Debug, Clone)]
pub enum Encoder {
    /// Affine lift of per-position feature vectors (adding task).
    Linear(Mlp),
    /// Learned token embedding table, vocab x d (temporal order task).
    Embedding(DenseMatrix),
}

impl Encoder {
    fn param_count(&self) -> usize {
        match self {
            Encoder::Linear(m) => m.param_count(),
            Encoder::Embedding(t) => t.data().len(),
        }
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        match self {
            Encoder::Linear(m) => m.write_params(out),
            Encoder::Embedding(t) => out.extend_from_slice(t.data()),
        }
    }

    fn read_params(&mut self, flat: &[f64]) -> usize {
        match self {
            Encoder::Linear(m) => m.read_params(flat),
            Encoder::Embedding(t) => {
                let len = t.data().len();
                t.data_mut().copy_from_slice(&flat[..len]);
                len
            }
        }
    }
}

/// One sequence, in the form the encoder expects.
#[derive(Debug, Clone, Copy)]
pub enum SeqInput<'a> {
    /// Token ids, one per position.
    Tokens(&'a [u8]),
    /// Per-position feature rows, N x in_dim.
    Features(&'a DenseMatrix),
}

/// Model hyperparameters. Defaults follow the block as evaluated on the
/// synthetic tasks: d = 32, d_v = d, hidden 64, tanh, M = log2 N factors on
/// the full-coverage pattern, no residual.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PsfConfig {
    pub n: usize,
    pub d: usize,
    pub d_v: usize,
    pub hidden: usize,
    pub m_factors: Option<usize>,
    pub mode: PatternMode,
    pub residual: bool,
    pub seed: u64,
}

impl PsfConfig {
    pub fn for_n(n: usize) -> Self {
        Self {
            n,
            d: 32,
            d_v: 32,
            hidden: 64,
            m_factors: None,
            mode: PatternMode::FullCoverage,
            residual: false,
            seed: 0,
        }
    }
}

/// The PSF-Attn block plus task head. Parameter order for the flat vector
/// is encoder, factor MLPs in chain order, value MLP, head.
#[derive(Debug, Clone)]
pub struct PsfAttnModel {
    pattern: Arc<SparsityPattern>,
    pub encoder: Encoder,
    pub factor_mlps: Vec<Mlp>,
    pub value_mlp: Mlp,
    pub head: Mlp,
    pub residual: bool,
    pub task: Task,
}

/// Everything a forward pass computes, kept for backprop.
pub struct ForwardTrace {
    pub e: DenseMatrix,
    pub chain: FactorChain,
    pub v: DenseMatrix,
    pub e_new: DenseMatrix,
    pub pooled: Vec<f64>,
    pub output: Vec<f64>,
    enc_trace: Option<MlpTrace>,
    tokens: Option<Vec<u8>>,
    factor_traces: Vec<MlpTrace>,
    value_trace: MlpTrace,
    head_trace: MlpTrace,
    /// partials[k] = W_{k+1} * ... * W_M * V, so partials[M] = V and
    /// partials[0] = chain * V.
    partials: Vec<DenseMatrix>,
}

impl PsfAttnModel {
    pub fn new(task: Task, cfg: &PsfConfig) -> Result<Self> {
        if cfg.d < 1 || cfg.d_v < 1 {
            return Err(SfError::InvalidInput("embedding widths must be >= 1".into()));
        }
        let pattern = Arc::new(build_pattern(cfg.n, cfg.mode)?);
        let deg = pattern.row_degree(0);
        if (0..cfg.n).any(|i| pattern.row_degree(i) != deg) {
            return Err(SfError::InvalidInput(
                "factor MLPs need a uniform row degree; use a power-of-two N".into(),
            ));
        }
        let m = cfg.m_factors.unwrap_or_else(|| pattern.k_exp().max(1));
        if m < 1 {
            return Err(SfError::InvalidInput("need at least one factor".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let encoder = match task {
            Task::Adding => Encoder::Linear(Mlp::new(&[2, cfg.d], Activation::Tanh, &mut rng)),
            Task::TemporalOrder => {
                let bound = (6.0 / (ORDER_VOCAB + cfg.d) as f64).sqrt();
                let data = (0..ORDER_VOCAB * cfg.d).map(|_| rng.gen_range(-bound..bound)).collect();
                Encoder::Embedding(DenseMatrix::from_vec(ORDER_VOCAB, cfg.d, data)?)
            }
        };
        let factor_mlps = (0..m)
            .map(|_| Mlp::new(&[cfg.d, cfg.hidden, deg], Activation::Tanh, &mut rng))
            .collect();
        let value_mlp = Mlp::new(&[cfg.d, cfg.hidden, cfg.d_v], Activation::Tanh, &mut rng);
        let head = Mlp::new(&[cfg.d_v, task.output_dim()], Activation::Tanh, &mut rng);
        Ok(Self { pattern, encoder, factor_mlps, value_mlp, head, residual: cfg.residual, task })
    }

    pub fn pattern(&self) -> &Arc<SparsityPattern> {
        &self.pattern
    }

    pub fn n(&self) -> usize {
        self.pattern.n()
    }

    pub fn m(&self) -> usize {
        self.factor_mlps.len()
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count()
            + self.factor_mlps.iter().map(Mlp::param_count).sum::<usize>()
            + self.value_mlp.param_count()
            + self.head.param_count()
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        self.encoder.write_params(out);
        for f in &self.factor_mlps {
            f.write_params(out);
        }
        self.value_mlp.write_params(out);
        self.head.write_params(out);
    }

    pub fn read_params(&mut self, flat: &[f64]) -> usize {
        let mut pos = self.encoder.read_params(flat);
        for f in &mut self.factor_mlps {
            pos += f.read_params(&flat[pos..]);
        }
        pos += self.value_mlp.read_params(&flat[pos..]);
        pos += self.head.read_params(&flat[pos..]);
        pos
    }

    fn encode(&self, input: SeqInput) -> Result<(DenseMatrix, Option<MlpTrace>, Option<Vec<u8>>)> {
        let (mut e, enc_trace, tokens) = self.encode_content(input)?;
        add_positional(&mut e);
        Ok((e, enc_trace, tokens))
    }

    /// Token/feature encoding without the positional term.
    fn encode_content(
        &self,
        input: SeqInput,
    ) -> Result<(DenseMatrix, Option<MlpTrace>, Option<Vec<u8>>)> {
        let n = self.n();
        match (input, &self.encoder) {
            (SeqInput::Features(feats), Encoder::Linear(mlp)) => {
                if feats.rows() != n {
                    return Err(SfError::ShapeMismatch(format!(
                        "sequence length {} does not match pattern N = {n}",
                        feats.rows()
                    )));
                }
                let trace = mlp.forward_trace(feats)?;
                Ok((trace.output().clone(), Some(trace), None))
            }
            (SeqInput::Tokens(tokens), Encoder::Embedding(table)) => {
                if tokens.len() != n {
                    return Err(SfError::ShapeMismatch(format!(
                        "sequence length {} does not match pattern N = {n}",
                        tokens.len()
                    )));
                }
                let d = table.cols();
                let mut e = DenseMatrix::zeros(n, d);
                for (i, &t) in tokens.iter().enumerate() {
                    if t as usize >= table.rows() {
                        return Err(SfError::IndexOutOfRange {
                            index: t as usize,
                            size: table.rows(),
                        });
                    }
                    e.row_mut(i).copy_from_slice(table.row(t as usize));
                }
                Ok((e, None, Some(tokens.to_vec())))
            }
            _ => Err(SfError::InvalidInput(
                "input kind does not match the model's encoder".into(),
            )),
        }
    }

    /// Build the factor chain from an embedding: row i of factor m is
    /// `f^(m)(E_i)` scattered onto the pattern's slot columns.
    pub fn build_factors(&self, e: &DenseMatrix) -> Result<FactorChain> {
        let (chain, _) = self.build_factors_traced(e)?;
        Ok(chain)
    }

    fn build_factors_traced(&self, e: &DenseMatrix) -> Result<(FactorChain, Vec<MlpTrace>)> {
        let n = self.n();
        if e.rows() != n {
            return Err(SfError::ShapeMismatch(format!(
                "embedding has {} rows, pattern N = {n}",
                e.rows()
            )));
        }
        let mut factors = Vec::with_capacity(self.m());
        let mut traces = Vec::with_capacity(self.m());
        for mlp in &self.factor_mlps {
            let trace = mlp.forward_trace(e)?;
            let out = trace.output();
            if !out.is_finite() {
                return Err(SfError::NumericFault("factor MLP produced non-finite values".into()));
            }
            let mut values = vec![0.0; self.pattern.nnz()];
            for i in 0..n {
                for (slot, &vi) in self.pattern.slot_value_indices(i).iter().enumerate() {
                    values[vi] = out.get(i, slot);
                }
            }
            factors.push(SparseSquareMatrix::new(self.pattern.clone(), values)?);
            traces.push(trace);
        }
        Ok((FactorChain::new(factors)?, traces))
    }

    /// Full block: encode, build factors, value-map, apply the chain,
    /// mean-pool, head.
    pub fn forward(&self, input: SeqInput) -> Result<ForwardTrace> {
        let (e, enc_trace, tokens) = self.encode(input)?;
        let (chain, factor_traces) = self.build_factors_traced(&e)?;
        let value_trace = self.value_mlp.forward_trace(&e)?;
        let v = value_trace.output().clone();
        let m = self.m();
        let mut partials = vec![v.clone()];
        for f in chain.factors().iter().rev() {
            let next = spmm_dense(f, partials.last().unwrap())?;
            partials.push(next);
        }
        partials.reverse();
        let mut e_new = partials[0].clone();
        if self.residual {
            for (x, &y) in e_new.data_mut().iter_mut().zip(v.data()) {
                *x += y;
            }
        }
        let n = self.n();
        let d_v = v.cols();
        let mut pooled = vec![0.0; d_v];
        for i in 0..n {
            for (p, &x) in pooled.iter_mut().zip(e_new.row(i)) {
                *p += x;
            }
        }
        pooled.iter_mut().for_each(|p| *p /= n as f64);
        let pooled_mat = DenseMatrix::from_vec(1, d_v, pooled.clone())?;
        let head_trace = self.head.forward_trace(&pooled_mat)?;
        let output = head_trace.output().row(0).to_vec();
        debug_assert_eq!(partials.len(), m + 1);
        Ok(ForwardTrace {
            e,
            chain,
            v,
            e_new,
            pooled,
            output,
            enc_trace,
            tokens,
            factor_traces,
            value_trace,
            head_trace,
            partials,
        })
    }

    /// Gradient of a scalar loss w.r.t. every parameter, given the loss
    /// gradient at the head output. Layout matches `write_params`.
    pub fn backward(&self, trace: &ForwardTrace, output_grad: &[f64]) -> Result<Vec<f64>> {
        let n = self.n();
        let m = self.m();
        let d_v = trace.v.cols();
        let pat = self.pattern.as_ref();
        let upstream = DenseMatrix::from_vec(1, output_grad.len(), output_grad.to_vec())?;
        let (head_grads, d_pooled) = self.head.backward(&trace.head_trace, &upstream);

        // mean pooling spreads the gradient evenly over rows
        let mut d_enew = DenseMatrix::zeros(n, d_v);
        for i in 0..n {
            for (g, &dp) in d_enew.row_mut(i).iter_mut().zip(d_pooled.row(0)) {
                *g = dp / n as f64;
            }
        }

        // walk the chain left to right: G_1 = dL/dE_new, and factor m sees
        // dW_m[i,j] = sum_c G_m[i,c] * Y_{m+1}[j,c]
        let mut factor_value_grads: Vec<Vec<f64>> = Vec::with_capacity(m);
        let mut g = d_enew.clone();
        for mi in 0..m {
            let y_next = &trace.partials[mi + 1];
            let mut vg = vec![0.0; pat.nnz()];
            for i in 0..n {
                let base = pat.row_start(i);
                let g_row = g.row(i);
                for (p, &j) in pat.row(i).iter().enumerate() {
                    vg[base + p] =
                        g_row.iter().zip(y_next.row(j)).map(|(&a, &b)| a * b).sum::<f64>();
                }
            }
            factor_value_grads.push(vg);
            g = spmm_transpose_dense(&trace.chain.factors()[mi], &g)?;
        }
        let mut d_v_mat = g;
        if self.residual {
            for (x, &y) in d_v_mat.data_mut().iter_mut().zip(d_enew.data()) {
                *x += y;
            }
        }

        // factor MLPs: upstream for row i is that row's slot gradients
        let mut d_e = DenseMatrix::zeros(n, trace.e.cols());
        let mut factor_grads = Vec::with_capacity(m);
        for (mi, mlp) in self.factor_mlps.iter().enumerate() {
            let deg = pat.row_degree(0);
            let mut up = DenseMatrix::zeros(n, deg);
            for i in 0..n {
                for (slot, &vi) in pat.slot_value_indices(i).iter().enumerate() {
                    up.set(i, slot, factor_value_grads[mi][vi]);
                }
            }
            let (grads, de) = mlp.backward(&trace.factor_traces[mi], &up);
            for (a, &b) in d_e.data_mut().iter_mut().zip(de.data()) {
                *a += b;
            }
            factor_grads.push(grads);
        }

        let (value_grads, de_from_v) = self.value_mlp.backward(&trace.value_trace, &d_v_mat);
        for (a, &b) in d_e.data_mut().iter_mut().zip(de_from_v.data()) {
            *a += b;
        }

        // encoder, then assemble the flat vector in write_params order
        let mut flat = Vec::with_capacity(self.param_count());
        match (&self.encoder, &trace.enc_trace, &trace.tokens) {
            (Encoder::Linear(mlp), Some(enc_trace), _) => {
                let (enc_grads, _) = mlp.backward(enc_trace, &d_e);
                enc_grads.write_flat(&mut flat);
            }
            (Encoder::Embedding(table), _, Some(tokens)) => {
                let mut tg = DenseMatrix::zeros(table.rows(), table.cols());
                for (i, &t) in tokens.iter().enumerate() {
                    for (a, &b) in tg.row_mut(t as usize).iter_mut().zip(d_e.row(i)) {
                        *a += b;
                    }
                }
                flat.extend_from_slice(tg.data());
            }
            _ => return Err(SfError::InvalidInput("trace does not match encoder".into())),
        }
        for g in &factor_grads {
            g.write_flat(&mut flat);
        }
        value_grads.write_flat(&mut flat);
        head_grads.write_flat(&mut flat);
        Ok(flat)
    }

    /// Row `i` of the materialized chain, computed without materializing it.
    pub fn attention_row(&self, input: SeqInput, i: usize) -> Result<Vec<f64>> {
        if i >= self.n() {
            return Err(SfError::IndexOutOfRange { index: i, size: self.n() });
        }
        let (e, _, _) = self.encode(input)?;
        let chain = self.build_factors(&e)?;
        row_of_product(&chain, i)
    }
}

/// Mean-squared error over a single scalar prediction.
pub fn adding_loss(output: &[f64], target: f64) -> (f64, Vec<f64>) {
    let diff = output[0] - target;
    (diff * diff, vec![2.0 * diff])
}

/// Softmax cross-entropy over 4 logits.
pub fn order_loss(output: &[f64], label: u8) -> (f64, Vec<f64>) {
    let max = output.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = output.iter().map(|&x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() + max - output[label as usize];
    let grad = exps
        .iter()
        .enumerate()
        .map(|(k, &e)| e / z - if k == label as usize { 1.0 } else { 0.0 })
        .collect();
    (loss, grad)
}

/// Training data for either task.
#[derive(Debug, Clone)]
pub enum TaskData {
    Adding(Vec<AddingInstance>),
    Order(Vec<OrderInstance>),
}

impl TaskData {
    pub fn len(&self) -> usize {
        match self {
            TaskData::Adding(v) => v.len(),
            TaskData::Order(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn task(&self) -> Task {
        match self {
            TaskData::Adding(_) => Task::Adding,
            TaskData::Order(_) => Task::TemporalOrder,
        }
    }

    fn check_lengths(&self, n: usize) -> Result<()> {
        let bad = match self {
            TaskData::Adding(v) => v.iter().any(|x| x.pairs.len() != n),
            TaskData::Order(v) => v.iter().any(|x| x.tokens.len() != n),
        };
        if bad {
            return Err(SfError::ShapeMismatch(format!(
                "dataset contains sequences whose length differs from N = {n}"
            )));
        }
        Ok(())
    }
}

/// Add fixed sinusoidal positional encodings to the embedding in place.
/// The chord offsets wrap mod N and pooling is a mean, so without a
/// positional term the whole block is rotation-invariant and cannot tell
/// which of two signal tokens comes first once the gap wraps; absolute
/// position has to enter through the encoder.
fn add_positional(e: &mut DenseMatrix) {
    let d = e.cols();
    for i in 0..e.rows() {
        let row = e.row_mut(i);
        for k in 0..d / 2 {
            let freq = 1.0 / 10_000f64.powf(2.0 * k as f64 / d as f64);
            let angle = i as f64 * freq;
            row[2 * k] += angle.sin();
            row[2 * k + 1] += angle.cos();
        }
        if d % 2 == 1 {
            let freq = 1.0 / 10_000f64.powf((d - 1) as f64 / d as f64);
            row[d - 1] += (i as f64 * freq).sin();
        }
    }
}

/// N x 2 feature rows `(a_t, b_t)` for one adding-task instance.
pub fn adding_features(inst: &AddingInstance) -> DenseMatrix {
    let data = inst.pairs.iter().flat_map(|&(a, b)| [a, b as f64]).collect();
    DenseMatrix::from_vec(inst.pairs.len(), 2, data).unwrap()
}

/// Training hyperparameters; batch 40 and lr 1e-3 are the evaluated
/// defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Stop as soon as eval accuracy reaches this, if set.
    pub stop_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 20, batch_size: 40, lr: 1e-3, seed: 0, stop_accuracy: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_accuracy: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub epochs: Vec<EpochMetrics>,
    pub final_accuracy: f64,
    pub wall_time_s: f64,
}

/// Minimize the task loss with minibatch Adam. On a numeric fault the model
/// is rolled back to its state at the start of the failing epoch and the
/// error is returned.
pub fn train(
    model: &mut PsfAttnModel,
    train_data: &TaskData,
    eval_data: &TaskData,
    cfg: &TrainConfig,
) -> Result<TrainMetrics> {
    if train_data.task() != model.task || eval_data.task() != model.task {
        return Err(SfError::InvalidInput("dataset task does not match the model".into()));
    }
    if train_data.is_empty() || cfg.batch_size == 0 {
        return Err(SfError::InvalidInput("empty training set or zero batch size".into()));
    }
    let n = model.n();
    train_data.check_lengths(n)?;
    eval_data.check_lengths(n)?;

    let start = Instant::now();
    let mut params = Vec::with_capacity(model.param_count());
    model.write_params(&mut params);
    let mut state = AdamState::new(params.len(), AdamHyper::with_lr(cfg.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    let mut metrics = TrainMetrics { epochs: Vec::new(), final_accuracy: 0.0, wall_time_s: 0.0 };

    for epoch in 0..cfg.epochs {
        let checkpoint = params.clone();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = vec![0.0; params.len()];
            let mut batch_loss = 0.0;
            let scale = 1.0 / batch.len() as f64;
            for &idx in batch {
                let step = || -> Result<f64> {
                    let (trace, loss, dout) = match train_data {
                        TaskData::Adding(v) => {
                            let feats = adding_features(&v[idx]);
                            let trace = model.forward(SeqInput::Features(&feats))?;
                            let (loss, dout) = adding_loss(&trace.output, v[idx].target);
                            (trace, loss, dout)
                        }
                        TaskData::Order(v) => {
                            let trace = model.forward(SeqInput::Tokens(&v[idx].tokens))?;
                            let (loss, dout) = order_loss(&trace.output, v[idx].label);
                            (trace, loss, dout)
                        }
                    };
                    let flat = model.backward(&trace, &dout)?;
                    for (a, &b) in grads.iter_mut().zip(&flat) {
                        *a += scale * b;
                    }
                    Ok(loss)
                }();
                match step {
                    Ok(loss) if loss.is_finite() => batch_loss += scale * loss,
                    Ok(loss) => {
                        model.read_params(&checkpoint);
                        return Err(SfError::NumericFault(format!(
                            "loss became {loss} in epoch {epoch}"
                        )));
                    }
                    Err(err) => {
                        model.read_params(&checkpoint);
                        return Err(err);
                    }
                }
            }
            adam_step(&mut params, &grads, &mut state);
            model.read_params(&params);
            epoch_loss += batch_loss * batch.len() as f64;
            seen += batch.len();
        }
        let eval_accuracy = evaluate(model, eval_data)?;
        metrics.epochs.push(EpochMetrics {
            epoch,
            train_loss: epoch_loss / seen as f64,
            eval_accuracy,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        metrics.final_accuracy = eval_accuracy;
        if cfg.stop_accuracy.is_some_and(|t| eval_accuracy >= t) {
            break;
        }
    }
    metrics.wall_time_s = start.elapsed().as_secs_f64();
    Ok(metrics)
}

/// Fraction of correct predictions: `|y - yhat| < 0.04` (strict) for the
/// adding task, argmax class match for temporal order.
pub fn evaluate(model: &PsfAttnModel, data: &TaskData) -> Result<f64> {
    if data.task() != model.task {
        return Err(SfError::InvalidInput("dataset task does not match the model".into()));
    }
    if data.is_empty() {
        return Ok(0.0);
    }
    data.check_lengths(model.n())?;
    let mut correct = 0usize;
    match data {
        TaskData::Adding(v) => {
            for inst in v {
                let feats = adding_features(inst);
                let trace = model.forward(SeqInput::Features(&feats))?;
                if (trace.output[0] - inst.target).abs() < 0.04 {
                    correct += 1;
                }
            }
        }
        TaskData::Order(v) => {
            for inst in v {
                let trace = model.forward(SeqInput::Tokens(&inst.tokens))?;
                let pred = trace
                    .output
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                if pred == inst.label as usize {
                    correct += 1;
                }
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}
