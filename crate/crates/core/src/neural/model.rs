//! The hierarchical encoder: per-token value bytes go through a small value
//! encoder, are summed with code, position and architecture embeddings, and
//! pass through self-attention layers. Nine heads predict the masked code
//! token and its eight value bytes; a pooling head produces function
//! embeddings.

use std::collections::HashMap;
use std::ops::Range;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, ValueCombiner};
use super::params::{normal, ParamSet};
use super::tape::{Tape, Var};
use crate::encoding::{EncodedInput, MaskedInput, BYTE_VOCAB, DUMMY_BYTE};

/// Number of byte classes a byte head is scored over. The dummy id is an
/// input symbol only and never a prediction target.
pub const BYTE_CLASSES: usize = 256;
pub const ARCH_COUNT: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub params: ParamSet,
}

/// Stacked contextual embeddings of a batch; `segments[i]` are the rows of
/// input `i`.
pub struct Encoded {
    pub hidden: Var,
    pub segments: Vec<Range<usize>>,
}

pub struct MlmOutputs {
    pub code_logits: Var,
    pub byte_logits: [Var; 8],
}

pub struct PretrainGraph {
    /// Training objective: the masked-LM loss divided by the masked count.
    pub loss: Var,
    pub outputs: MlmOutputs,
    pub code_targets: Vec<Option<usize>>,
    pub byte_targets: [Vec<Option<usize>>; 8],
}

fn lstm_names(layer: usize, dir: &str) -> [String; 3] {
    let p = format!("value.l{layer}.{dir}");
    [format!("{p}.wx"), format!("{p}.wh"), format!("{p}.b")]
}

impl Model {
    pub fn new(config: ModelConfig, vocab_size: usize, seed: u64) -> Model {
        config.validate().expect("valid model config");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let d = c.d_emb;
        let mut p = ParamSet::default();
        let w = |rng: &mut ChaCha8Rng, r: usize, k: usize| normal(rng, r, k, 1.0 / (r as f64).sqrt());
        let emb_std = 1.0 / (d as f64).sqrt();
        p.push("emb.code", normal(&mut rng, vocab_size, d, emb_std));
        p.push("emb.instr", normal(&mut rng, c.max_len, d, emb_std));
        p.push("emb.operand", normal(&mut rng, c.max_operands, d, emb_std));
        p.push("emb.arch", normal(&mut rng, ARCH_COUNT, d, emb_std));
        match c.value_combiner {
            ValueCombiner::Bilstm => {
                let (e, h) = (c.byte_emb, c.lstm_hidden);
                p.push("value.byte", normal(&mut rng, BYTE_VOCAB, e, 1.0 / (e as f64).sqrt()));
                for layer in 0..2 {
                    let input = if layer == 0 { e } else { 2 * h };
                    for dir in ["fw", "bw"] {
                        let [wx, wh, b] = lstm_names(layer, dir);
                        p.push(wx, w(&mut rng, input, 4 * h));
                        p.push(wh, w(&mut rng, h, 4 * h));
                        let mut bias = Array2::zeros((1, 4 * h));
                        // Forget gate starts open.
                        bias.slice_mut(ndarray::s![.., h..2 * h]).fill(1.0);
                        p.push(b, bias);
                    }
                }
                p.push("value.proj", w(&mut rng, 2 * h, d));
                p.push("value.proj_b", Array2::zeros((1, d)));
            }
            ValueCombiner::Mlp => {
                let e = c.byte_emb;
                p.push("value.byte", normal(&mut rng, BYTE_VOCAB, e, 1.0 / (e as f64).sqrt()));
                p.push("value.w1", w(&mut rng, 8 * e, d));
                p.push("value.b1", Array2::zeros((1, d)));
                p.push("value.w2", w(&mut rng, d, d));
                p.push("value.b2", Array2::zeros((1, d)));
            }
            ValueCombiner::Sum => {
                p.push("value.byte", normal(&mut rng, BYTE_VOCAB, d, emb_std / 8f64.sqrt()));
            }
        }
        let dh = c.head_dim();
        for l in 0..c.layers {
            for h in 0..c.heads {
                for m in ["wq", "wk", "wv"] {
                    p.push(format!("layer{l}.head{h}.{m}"), w(&mut rng, d, dh));
                }
            }
            p.push(format!("layer{l}.wo"), w(&mut rng, d, d) * 0.5);
            p.push(format!("layer{l}.bo"), Array2::zeros((1, d)));
            p.push(format!("layer{l}.ffn.w1"), w(&mut rng, d, c.ffn));
            p.push(format!("layer{l}.ffn.b1"), Array2::zeros((1, c.ffn)));
            p.push(format!("layer{l}.ffn.w2"), w(&mut rng, c.ffn, d) * 0.5);
            p.push(format!("layer{l}.ffn.b2"), Array2::zeros((1, d)));
        }
        let heads = std::iter::once(("head.code".to_string(), vocab_size))
            .chain((0..8).map(|j| (format!("head.byte{j}"), BYTE_VOCAB)));
        for (name, out) in heads {
            p.push(format!("{name}.w1"), w(&mut rng, d, d));
            p.push(format!("{name}.b1"), Array2::zeros((1, d)));
            p.push(format!("{name}.w2"), normal(&mut rng, d, out, 0.02));
            p.push(format!("{name}.b2"), Array2::zeros((1, out)));
        }
        p.push("sim.w1", w(&mut rng, d, d));
        p.push("sim.w2", w(&mut rng, d, c.d_func));
        Model {
            config,
            vocab_size,
            params: p,
        }
    }

    fn p(&self, tape: &mut Tape, name: &str) -> Var {
        tape.param(&self.params, self.params.index(name))
    }

    fn dense(&self, tape: &mut Tape, x: Var, w: &str, b: &str) -> Var {
        let wv = self.p(tape, w);
        let bv = self.p(tape, b);
        let y = tape.matmul(x, wv);
        tape.add_row(y, bv)
    }

    fn dropout(&self, tape: &mut Tape, x: Var, rng: &mut Option<&mut ChaCha8Rng>) -> Var {
        let rate = self.config.dropout;
        match rng {
            Some(rng) if rate > 0.0 => {
                let keep = 1.0 / (1.0 - rate);
                let shape = tape.value(x).raw_dim();
                let mask = Array2::from_shape_fn(shape, |_| if rng.random::<f64>() < rate { 0.0 } else { keep });
                let m = tape.input(mask);
                tape.mul(x, m)
            }
            _ => x,
        }
    }

    /// Encodes each distinct byte sequence once; returns the encoded rows
    /// and, per input sequence, the row to use.
    pub fn value_encoder(&self, tape: &mut Tape, seqs: &[[u16; 8]]) -> Var {
        let c = &self.config;
        let col = |t: usize| -> Vec<usize> { seqs.iter().map(|s| s[t] as usize).collect() };
        let table = self.p(tape, "value.byte");
        match c.value_combiner {
            ValueCombiner::Sum => {
                let mut acc = tape.rows(table, col(0));
                for t in 1..8 {
                    let r = tape.rows(table, col(t));
                    acc = tape.add(acc, r);
                }
                acc
            }
            ValueCombiner::Mlp => {
                let parts = (0..8).map(|t| tape.rows(table, col(t))).collect();
                let x = tape.concat_cols(parts);
                let h = self.dense(tape, x, "value.w1", "value.b1");
                let h = tape.gelu(h);
                self.dense(tape, h, "value.w2", "value.b2")
            }
            ValueCombiner::Bilstm => {
                let mut xs: Vec<Var> = (0..8).map(|t| tape.rows(table, col(t))).collect();
                let mut last = (xs[7], xs[0]);
                for layer in 0..2 {
                    let fw = self.lstm_pass(tape, &xs, layer, "fw", false);
                    let bw = self.lstm_pass(tape, &xs, layer, "bw", true);
                    last = (fw[7], bw[0]);
                    xs = (0..8).map(|t| tape.concat_cols(vec![fw[t], bw[t]])).collect();
                }
                let top = tape.concat_cols(vec![last.0, last.1]);
                self.dense(tape, top, "value.proj", "value.proj_b")
            }
        }
    }

    /// Hidden states of one LSTM direction, indexed by time step.
    fn lstm_pass(&self, tape: &mut Tape, xs: &[Var], layer: usize, dir: &str, reverse: bool) -> Vec<Var> {
        let h = self.config.lstm_hidden;
        let [wx, wh, b] = lstm_names(layer, dir);
        let (wx, wh, b) = (self.p(tape, &wx), self.p(tape, &wh), self.p(tape, &b));
        let mut out = vec![xs[0]; xs.len()];
        let mut state: Option<(Var, Var)> = None;
        let order: Vec<usize> = if reverse {
            (0..xs.len()).rev().collect()
        } else {
            (0..xs.len()).collect()
        };
        for t in order {
            let mut z = tape.matmul(xs[t], wx);
            if let Some((hp, _)) = state {
                let r = tape.matmul(hp, wh);
                z = tape.add(z, r);
            }
            let z = tape.add_row(z, b);
            let gi = tape.slice_cols(z, 0, h);
            let i = tape.sigmoid(gi);
            let gg = tape.slice_cols(z, 2 * h, 3 * h);
            let g = tape.tanh(gg);
            let go = tape.slice_cols(z, 3 * h, 4 * h);
            let o = tape.sigmoid(go);
            let mut cell = tape.mul(i, g);
            if let Some((_, cp)) = state {
                let gf = tape.slice_cols(z, h, 2 * h);
                let f = tape.sigmoid(gf);
                let keep = tape.mul(f, cp);
                cell = tape.add(keep, cell);
            }
            let tc = tape.tanh(cell);
            let hid = tape.mul(o, tc);
            out[t] = hid;
            state = Some((hid, cell));
        }
        out
    }

    /// Sum of the five component embeddings for every token of the batch.
    pub fn embed_inputs(&self, tape: &mut Tape, inputs: &[&EncodedInput]) -> (Var, Vec<Range<usize>>) {
        let c = &self.config;
        let mut segments = Vec::with_capacity(inputs.len());
        let (mut tok, mut ins, mut opn, mut arch, mut vrow) = (vec![], vec![], vec![], vec![], vec![]);
        let mut uniq: HashMap<[u16; 8], usize> = HashMap::new();
        let mut seqs: Vec<[u16; 8]> = Vec::new();
        for e in inputs {
            debug_assert!(e.is_aligned());
            let start = tok.len();
            let base = e.instr_pos.iter().copied().min().unwrap_or(0);
            for i in 0..e.len() {
                tok.push(e.tokens[i] as usize);
                ins.push(((e.instr_pos[i] - base) as usize).min(c.max_len - 1));
                opn.push((e.operand_pos[i] as usize).min(c.max_operands - 1));
                arch.push(e.arch[i] as usize);
                let next = seqs.len();
                let r = *uniq.entry(e.values[i]).or_insert(next);
                if r == next {
                    seqs.push(e.values[i]);
                }
                vrow.push(r);
            }
            segments.push(start..tok.len());
        }
        let values = self.value_encoder(tape, &seqs);
        let values = tape.rows(values, vrow);
        let mut x = values;
        for (name, idx) in [
            ("emb.code", tok),
            ("emb.instr", ins),
            ("emb.operand", opn),
            ("emb.arch", arch),
        ] {
            let table = self.p(tape, name);
            let r = tape.rows(table, idx);
            x = tape.add(x, r);
        }
        (x, segments)
    }

    pub fn attention_layer(
        &self,
        tape: &mut Tape,
        x: Var,
        l: usize,
        segments: &[Range<usize>],
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Var {
        let scale = 1.0 / (self.config.d_emb as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let [q, k, v] = ["wq", "wk", "wv"].map(|m| {
                let w = self.p(tape, &format!("layer{l}.head{h}.{m}"));
                tape.matmul(x, w)
            });
            heads.push(tape.attention(q, k, v, segments.to_vec(), scale));
        }
        let cat = tape.concat_cols(heads);
        let a = self.dense(tape, cat, &format!("layer{l}.wo"), &format!("layer{l}.bo"));
        let a = self.dropout(tape, a, rng);
        let x1 = tape.add(x, a);
        let f = self.dense(tape, x1, &format!("layer{l}.ffn.w1"), &format!("layer{l}.ffn.b1"));
        let f = tape.gelu(f);
        let f = self.dense(tape, f, &format!("layer{l}.ffn.w2"), &format!("layer{l}.ffn.b2"));
        let f = self.dropout(tape, f, rng);
        tape.add(x1, f)
    }

    /// Runs the encoder over a batch. Dropout is active only when `rng` is given.
    pub fn encode(&self, tape: &mut Tape, inputs: &[&EncodedInput], mut rng: Option<&mut ChaCha8Rng>) -> Encoded {
        let (x, segments) = self.embed_inputs(tape, inputs);
        let mut x = self.dropout(tape, x, &mut rng);
        for l in 0..self.config.layers {
            x = self.attention_layer(tape, x, l, &segments, &mut rng);
        }
        Encoded { hidden: x, segments }
    }

    fn head(&self, tape: &mut Tape, h: Var, name: &str) -> Var {
        let z = self.dense(tape, h, &format!("{name}.w1"), &format!("{name}.b1"));
        let z = tape.tanh(z);
        self.dense(tape, z, &format!("{name}.w2"), &format!("{name}.b2"))
    }

    /// The nine prediction heads at the given stacked row indices.
    pub fn mlm_heads(&self, tape: &mut Tape, hidden: Var, rows: Vec<usize>) -> MlmOutputs {
        let h = tape.rows(hidden, rows);
        let code_logits = self.head(tape, h, "head.code");
        let byte_logits = std::array::from_fn(|j| self.head(tape, h, &format!("head.byte{j}")));
        MlmOutputs {
            code_logits,
            byte_logits,
        }
    }

    pub fn pretrain_graph(
        &self,
        tape: &mut Tape,
        batch: &[&MaskedInput],
        rng: Option<&mut ChaCha8Rng>,
    ) -> PretrainGraph {
        let inputs: Vec<&EncodedInput> = batch.iter().map(|m| &m.input).collect();
        let enc = self.encode(tape, &inputs, rng);
        let mut rows = Vec::new();
        let mut code_targets = Vec::new();
        let mut byte_targets: [Vec<Option<usize>>; 8] = Default::default();
        for (m, seg) in batch.iter().zip(&enc.segments) {
            for (k, &p) in m.positions.iter().enumerate() {
                rows.push(seg.start + p);
                code_targets.push(Some(m.original_tokens[k] as usize));
                let v = m.original_values[k];
                for (j, t) in byte_targets.iter_mut().enumerate() {
                    t.push((v[j] != DUMMY_BYTE).then_some(v[j] as usize));
                }
            }
        }
        let outputs = self.mlm_heads(tape, enc.hidden, rows);
        let w = 1.0 / code_targets.len().max(1) as f64;
        let mut loss = tape.cross_entropy(outputs.code_logits, code_targets.clone(), self.vocab_size, w);
        for (j, t) in byte_targets.iter().enumerate() {
            let l = tape.cross_entropy(outputs.byte_logits[j], t.clone(), BYTE_CLASSES, self.config.alpha * w);
            loss = tape.add(loss, l);
        }
        PretrainGraph {
            loss,
            outputs,
            code_targets,
            byte_targets,
        }
    }

    /// Pools each input's rows and applies `tanh(mean * W1) * W2`.
    pub fn pool(&self, tape: &mut Tape, enc: &Encoded) -> Var {
        let m = tape.segment_mean(enc.hidden, enc.segments.clone());
        let w1 = self.p(tape, "sim.w1");
        let w2 = self.p(tape, "sim.w2");
        let z = tape.matmul(m, w1);
        let z = tape.tanh(z);
        tape.matmul(z, w2)
    }

    /// One embedding row per function; a function split into several chunks
    /// gets the mean of its chunk embeddings.
    pub fn function_embeddings(&self, tape: &mut Tape, functions: &[Vec<EncodedInput>]) -> Var {
        let chunks: Vec<&EncodedInput> = functions.iter().flatten().collect();
        let enc = self.encode(tape, &chunks, None);
        let per_chunk = self.pool(tape, &enc);
        let mut groups = Vec::with_capacity(functions.len());
        let mut start = 0;
        for f in functions {
            assert!(!f.is_empty(), "function without chunks");
            groups.push(start..start + f.len());
            start += f.len();
        }
        tape.segment_mean(per_chunk, groups)
    }
}
