use rand::Rng;

use super::{check_ids, PAD};
use crate::numcore::{init_uniform, kernels, ParamId, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

const INIT_SCALE: f64 = 0.1;
const FORGET_BIAS: f64 = 1.0;

/// Batched hidden/cell state of one layer (`batch × hidden`).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerState {
    pub h: Tensor,
    pub c: Tensor,
}

#[derive(Clone)]
struct LstmLayer {
    w: ParamId,
    b: ParamId,
    input_dim: usize,
}

/// Stacked LSTM. Each layer holds one fused `[(input + hidden) × 4·hidden]`
/// weight with gate blocks in the order input, forget, cell, output.
#[derive(Clone)]
pub struct LstmStack {
    layers: Vec<LstmLayer>,
    hidden: usize,
}

impl LstmStack {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        num_layers: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let layers = (0..num_layers)
            .map(|l| {
                let in_dim = if l == 0 { input_dim } else { hidden };
                let w = store.add(
                    format!("{prefix}.l{l}.w"),
                    init_uniform(&[in_dim + hidden, 4 * hidden], INIT_SCALE, rng),
                );
                let mut bias = Tensor::zeros(&[1, 4 * hidden]);
                bias.data_mut()[hidden..2 * hidden].fill(FORGET_BIAS);
                let b = store.add(format!("{prefix}.l{l}.b"), bias);
                LstmLayer {
                    w,
                    b,
                    input_dim: in_dim,
                }
            })
            .collect();
        LstmStack { layers, hidden }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.w, l.b]).collect()
    }

    pub fn zero_state(&self, batch: usize) -> Vec<LayerState> {
        (0..self.layers.len())
            .map(|_| LayerState {
                h: Tensor::zeros(&[batch, self.hidden]),
                c: Tensor::zeros(&[batch, self.hidden]),
            })
            .collect()
    }

    /// One recorded time step. Rows whose `mask` entry is 0 keep their
    /// previous state.
    pub fn step_tape(
        &self,
        tape: &mut Tape<'_>,
        x: Var,
        state: &[(Var, Var)],
        mask: Option<&[f64]>,
    ) -> Result<Vec<(Var, Var)>> {
        let h = self.hidden;
        let mut input = x;
        let mut next = Vec::with_capacity(self.layers.len());
        for (layer, &(h_prev, c_prev)) in self.layers.iter().zip(state) {
            let w = tape.param(layer.w)?;
            let b = tape.param(layer.b)?;
            let xh = tape.concat_cols(&[input, h_prev])?;
            let z = tape.matmul(xh, w)?;
            let gates = tape.add_row(z, b)?;
            let i_raw = tape.slice_cols(gates, 0, h)?;
            let f_raw = tape.slice_cols(gates, h, 2 * h)?;
            let g_raw = tape.slice_cols(gates, 2 * h, 3 * h)?;
            let o_raw = tape.slice_cols(gates, 3 * h, 4 * h)?;
            let i = tape.sigmoid(i_raw)?;
            let f = tape.sigmoid(f_raw)?;
            let g = tape.tanh(g_raw)?;
            let o = tape.sigmoid(o_raw)?;
            let fc = tape.mul(f, c_prev)?;
            let ig = tape.mul(i, g)?;
            let mut c = tape.add(fc, ig)?;
            let tc = tape.tanh(c)?;
            let mut hn = tape.mul(o, tc)?;
            if let Some(m) = mask {
                hn = tape.row_blend(hn, h_prev, m)?;
                c = tape.row_blend(c, c_prev, m)?;
            }
            next.push((hn, c));
            input = hn;
        }
        Ok(next)
    }

    /// Tape-free time step over a batch.
    pub fn step(
        &self,
        store: &ParamStore,
        x: &Tensor,
        state: &[LayerState],
        mask: Option<&[f64]>,
    ) -> Result<Vec<LayerState>> {
        let hd = self.hidden;
        let mut input = x.clone();
        let mut next = Vec::with_capacity(self.layers.len());
        for (layer, prev) in self.layers.iter().zip(state) {
            let xh = kernels::concat_cols(&[&input, &prev.h])?;
            let z = kernels::add_row(&kernels::matmul(&xh, store.value(layer.w))?, store.value(layer.b))?;
            let rows = z.rows();
            let mut h = Tensor::zeros(&[rows, hd]);
            let mut c = Tensor::zeros(&[rows, hd]);
            for r in 0..rows {
                let zr = z.row(r);
                let keep = mask.map_or(1.0, |m| m[r]);
                for j in 0..hd {
                    let i = kernels::sigmoid(zr[j]);
                    let f = kernels::sigmoid(zr[hd + j]);
                    let g = zr[2 * hd + j].tanh();
                    let o = kernels::sigmoid(zr[3 * hd + j]);
                    let cp = prev.c.row(r)[j];
                    let cn = f * cp + i * g;
                    let hn = o * cn.tanh();
                    let idx = r * hd + j;
                    if keep == 1.0 {
                        c.data_mut()[idx] = cn;
                        h.data_mut()[idx] = hn;
                    } else {
                        c.data_mut()[idx] = keep * cn + (1.0 - keep) * cp;
                        h.data_mut()[idx] = keep * hn + (1.0 - keep) * prev.h.row(r)[j];
                    }
                }
            }
            if !h.all_finite() || !c.all_finite() {
                return Err(Error::Numeric("non-finite LSTM state".into()));
            }
            next.push(LayerState { h, c });
            input = next.last().unwrap().h.clone();
        }
        Ok(next)
    }
}

/// Pads `seqs` on the right with PAD and returns the per-step columns of ids
/// and masks (1 where a real token is present).
fn step_columns(seqs: &[&[u32]]) -> (Vec<Vec<usize>>, Vec<Vec<f64>>) {
    let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut ids = Vec::with_capacity(len);
    let mut masks = Vec::with_capacity(len);
    for t in 0..len {
        ids.push(
            seqs.iter()
                .map(|s| s.get(t).copied().unwrap_or(PAD) as usize)
                .collect(),
        );
        masks.push(seqs.iter().map(|s| if t < s.len() { 1.0 } else { 0.0 }).collect());
    }
    (ids, masks)
}

/// Embedding table plus an LSTM stack, read left to right.
#[derive(Clone)]
pub struct Encoder {
    pub embedding: ParamId,
    pub lstm: LstmStack,
    vocab_size: usize,
    max_len: usize,
}

impl Encoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        vocab_size: usize,
        embed_dim: usize,
        hidden: usize,
        num_layers: usize,
        max_len: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let embedding = store.add(
            format!("{prefix}.embedding"),
            init_uniform(&[vocab_size, embed_dim], INIT_SCALE, rng),
        );
        let lstm = LstmStack::new(store, &format!("{prefix}.lstm"), embed_dim, hidden, num_layers, rng);
        Encoder {
            embedding,
            lstm,
            vocab_size,
            max_len,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.embedding];
        ids.extend(self.lstm.param_ids());
        ids
    }

    pub fn validate(&self, srcs: &[&[u32]]) -> Result<()> {
        if srcs.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        for s in srcs {
            check_ids(s, self.vocab_size, "source")?;
            if s.len() > self.max_len {
                return Err(Error::invalid(format!(
                    "source of length {} exceeds max_len {}",
                    s.len(),
                    self.max_len
                )));
            }
        }
        Ok(())
    }

    /// Final per-layer `(h, c)` vars for a padded batch.
    pub fn encode_tape(&self, tape: &mut Tape<'_>, srcs: &[&[u32]]) -> Result<Vec<(Var, Var)>> {
        self.validate(srcs)?;
        let zero = tape.input(Tensor::zeros(&[srcs.len(), self.lstm.hidden()]))?;
        let mut state = vec![(zero, zero); self.lstm.num_layers()];
        let table = tape.param(self.embedding)?;
        let (ids, masks) = step_columns(srcs);
        for (col, mask) in ids.iter().zip(&masks) {
            let x = tape.embedding(table, col)?;
            let full = mask.iter().all(|&m| m == 1.0);
            state = self.lstm.step_tape(tape, x, &state, (!full).then_some(&mask[..]))?;
        }
        Ok(state)
    }

    pub fn encode(&self, store: &ParamStore, srcs: &[&[u32]]) -> Result<Vec<LayerState>> {
        self.validate(srcs)?;
        let mut state = self.lstm.zero_state(srcs.len());
        let table = store.value(self.embedding);
        let (ids, masks) = step_columns(srcs);
        for (col, mask) in ids.iter().zip(&masks) {
            let x = kernels::embedding_rows(table, col)?;
            let full = mask.iter().all(|&m| m == 1.0);
            state = self.lstm.step(store, &x, &state, (!full).then_some(&mask[..]))?;
        }
        Ok(state)
    }
}

/// Per-sequence decoder state used by the search procedures.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    /// `(h, c)` per layer.
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
    /// Final top-layer encoder state fed to every decoder step; empty for an
    /// unconditional decoder.
    pub context: Vec<f64>,
}

impl DecoderState {
    pub(crate) fn split_batch(states: &[LayerState], context: Option<&Tensor>) -> Vec<DecoderState> {
        let batch = states.first().map_or(0, |s| s.h.rows());
        (0..batch)
            .map(|r| DecoderState {
                layers: states
                    .iter()
                    .map(|s| (s.h.row(r).to_vec(), s.c.row(r).to_vec()))
                    .collect(),
                context: context.map_or_else(Vec::new, |c| c.row(r).to_vec()),
            })
            .collect()
    }

    pub(crate) fn gather(states: &[&DecoderState]) -> Result<(Vec<LayerState>, Option<Tensor>)> {
        let first = states.first().ok_or_else(|| Error::invalid("empty state batch"))?;
        let layers = (0..first.layers.len())
            .map(|l| {
                let hs: Vec<&[f64]> = states.iter().map(|s| &s.layers[l].0[..]).collect();
                let cs: Vec<&[f64]> = states.iter().map(|s| &s.layers[l].1[..]).collect();
                Ok(LayerState {
                    h: Tensor::from_rows(&hs)?,
                    c: Tensor::from_rows(&cs)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let context = if first.context.is_empty() {
            None
        } else {
            let rows: Vec<&[f64]> = states.iter().map(|s| &s.context[..]).collect();
            Some(Tensor::from_rows(&rows)?)
        };
        Ok((layers, context))
    }
}

/// LSTM stack plus output projection. With `context_dim > 0` every input is
/// the token embedding concatenated with a fixed context vector.
#[derive(Clone)]
pub struct Decoder {
    pub embedding: ParamId,
    pub lstm: LstmStack,
    pub out_w: ParamId,
    pub out_b: ParamId,
    vocab_size: usize,
    context_dim: usize,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        embedding: ParamId,
        vocab_size: usize,
        embed_dim: usize,
        context_dim: usize,
        hidden: usize,
        num_layers: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let lstm = LstmStack::new(
            store,
            &format!("{prefix}.lstm"),
            embed_dim + context_dim,
            hidden,
            num_layers,
            rng,
        );
        let out_w = store.add(
            format!("{prefix}.out.w"),
            init_uniform(&[hidden, vocab_size], INIT_SCALE, rng),
        );
        let out_b = store.add(format!("{prefix}.out.b"), Tensor::zeros(&[1, vocab_size]));
        Decoder {
            embedding,
            lstm,
            out_w,
            out_b,
            vocab_size,
            context_dim,
        }
    }

    /// Own parameters (the embedding table is excluded; it may be shared).
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.lstm.param_ids();
        ids.extend([self.out_w, self.out_b]);
        ids
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Teacher-forced loss: inputs `[BOS, y…]`, targets `[y…, EOS]` (EOS only
    /// when `append_eos`). Returns the mean over all real target tokens and
    /// the number of those tokens.
    pub fn nll_tape(
        &self,
        tape: &mut Tape<'_>,
        init: Vec<(Var, Var)>,
        context: Option<Var>,
        tgts: &[&[u32]],
        append_eos: bool,
    ) -> Result<(Var, usize)> {
        for t in tgts {
            if t.is_empty() && !append_eos {
                return Err(Error::invalid("target is empty"));
            }
            if !t.is_empty() {
                check_ids(t, self.vocab_size, "target")?;
            }
        }
        let lens: Vec<usize> = tgts.iter().map(|t| t.len() + usize::from(append_eos)).collect();
        let total: usize = lens.iter().sum();
        let steps = lens.iter().copied().max().unwrap_or(0);
        let weight = 1.0 / total as f64;
        let table = tape.param(self.embedding)?;
        let out_w = tape.param(self.out_w)?;
        let out_b = tape.param(self.out_b)?;
        let mut state = init;
        let mut tops = Vec::with_capacity(steps);
        let mut targets = Vec::with_capacity(steps * tgts.len());
        let mut weights = Vec::with_capacity(steps * tgts.len());
        for t in 0..steps {
            let prev: Vec<usize> = tgts
                .iter()
                .map(|s| if t == 0 { super::BOS } else { s.get(t - 1).copied().unwrap_or(PAD) } as usize)
                .collect();
            let emb = tape.embedding(table, &prev)?;
            let x = match context {
                Some(ctx) => tape.concat_cols(&[emb, ctx])?,
                None => emb,
            };
            state = self.lstm.step_tape(tape, x, &state, None)?;
            tops.push(state.last().unwrap().0);
            for (s, &len) in tgts.iter().zip(&lens) {
                if t < len {
                    targets.push(s.get(t).copied().unwrap_or(super::EOS) as usize);
                    weights.push(weight);
                } else {
                    targets.push(PAD as usize);
                    weights.push(0.0);
                }
            }
        }
        let hidden = tape.concat_rows(&tops)?;
        let proj = tape.matmul(hidden, out_w)?;
        let logits = tape.add_row(proj, out_b)?;
        let loss = tape.softmax_xent(logits, &targets, &weights)?;
        Ok((loss, total))
    }

    /// Logits for one step over a batch of states.
    pub fn step(
        &self,
        store: &ParamStore,
        states: &[&DecoderState],
        prevs: &[u32],
    ) -> Result<Vec<(Vec<f64>, DecoderState)>> {
        if states.len() != prevs.len() {
            return Err(Error::invalid("states and tokens differ in length"));
        }
        if let Some(&bad) = prevs.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary")));
        }
        let (layers, context) = DecoderState::gather(states)?;
        if layers.len() != self.lstm.num_layers() {
            return Err(Error::invalid("state layer count does not match the model"));
        }
        let ids: Vec<usize> = prevs.iter().map(|&t| t as usize).collect();
        let emb = kernels::embedding_rows(store.value(self.embedding), &ids)?;
        let x = match (&context, self.context_dim) {
            (Some(ctx), d) if d > 0 => kernels::concat_cols(&[&emb, ctx])?,
            (None, 0) => emb,
            _ => return Err(Error::invalid("decoder context does not match the model")),
        };
        let next = self.lstm.step(store, &x, &layers, None)?;
        let top = &next.last().unwrap().h;
        let logits = kernels::add_row(&kernels::matmul(top, store.value(self.out_w))?, store.value(self.out_b))?;
        let new_states = DecoderState::split_batch(&next, context.as_ref());
        Ok(new_states
            .into_iter()
            .enumerate()
            .map(|(r, s)| (logits.row(r).to_vec(), s))
            .collect())
    }

    /// Teacher-forced log-probability of each target under the tape-free
    /// path: `(Σ log p, token count)` per row.
    pub fn score(
        &self,
        store: &ParamStore,
        init: Vec<DecoderState>,
        tgts: &[&[u32]],
        append_eos: bool,
    ) -> Result<Vec<(f64, usize)>> {
        let full: Vec<Vec<u32>> = tgts
            .iter()
            .map(|t| {
                let mut v = t.to_vec();
                if append_eos {
                    v.push(super::EOS);
                }
                v
            })
            .collect();
        for f in &full {
            check_ids(f, self.vocab_size, "target")?;
        }
        let steps = full.iter().map(|f| f.len()).max().unwrap_or(0);
        let mut states = init;
        let mut out: Vec<(f64, usize)> = full.iter().map(|f| (0.0, f.len())).collect();
        for t in 0..steps {
            let active: Vec<usize> = (0..full.len()).filter(|&i| t < full[i].len()).collect();
            let refs: Vec<&DecoderState> = active.iter().map(|&i| &states[i]).collect();
            let prevs: Vec<u32> = active
                .iter()
                .map(|&i| if t == 0 { super::BOS } else { full[i][t - 1] })
                .collect();
            let stepped = self.step(store, &refs, &prevs)?;
            for (&i, (logits, st)) in active.iter().zip(stepped) {
                let lp = kernels::log_softmax(&logits);
                out[i].0 += lp[full[i][t] as usize];
                states[i] = st;
            }
        }
        Ok(out)
    }
}
