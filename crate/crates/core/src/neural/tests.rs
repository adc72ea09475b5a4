use ndarray::{array, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::{gen_function, DEFAULT_SIZE};
use crate::encoding::{
    apply_mask, build_vocab, split_subsequences, tokenize_trace, EncodedInput, MaskedInput, Vocab, DUMMY_VALUE,
    WINDOW_CHOICES,
};
use crate::ir::{parse_function, Dialect};
use crate::microtrace::{dummy_trace, micro_execute, trace_batch, MicroTrace, TracerConfig};

fn corpus(n: u64) -> (Vocab, Vec<EncodedInput>) {
    let cfg = TracerConfig::default();
    let traces: Vec<MicroTrace> = (0..n)
        .flat_map(|s| trace_batch(&gen_function(s, DEFAULT_SIZE), &[s + 1, s + 2], &cfg))
        .collect();
    let vocab = build_vocab(&traces);
    let inputs = traces
        .iter()
        .flat_map(|t| split_subsequences(&tokenize_trace(t, &vocab).unwrap(), 64).unwrap())
        .collect();
    (vocab, inputs)
}

fn tiny_input(n_instr: usize) -> (Vocab, EncodedInput) {
    let f = parse_function("r1 := r2 + 0x3\nr3 := load(r1)\nret", Dialect::ArchA).unwrap();
    let t = micro_execute(&f, 7, &TracerConfig::default());
    let vocab = build_vocab([&t, &dummy_trace(&f)]);
    let mut e = tokenize_trace(&t, &vocab).unwrap();
    let keep = e.instruction_starts().get(n_instr).copied().unwrap_or(e.len());
    e = EncodedInput::concat(&[e]).clone();
    e.tokens.truncate(keep);
    e.values.truncate(keep);
    e.instr_pos.truncate(keep);
    e.operand_pos.truncate(keep);
    e.arch.truncate(keep);
    (vocab, e)
}

fn embed(model: &Model, e: &EncodedInput) -> Array2<f64> {
    let mut tape = Tape::new();
    let (x, _) = model.embed_inputs(&mut tape, &[e]);
    tape.value(x).clone()
}

#[test]
fn zero_tables_give_zero_embeddings() {
    let (vocab, e) = tiny_input(3);
    let mut cfg = ModelConfig::tiny();
    cfg.value_combiner = ValueCombiner::Sum;
    let mut m = Model::new(cfg, vocab.len(), 1);
    for name in ["emb.code", "emb.instr", "emb.operand", "emb.arch", "value.byte"] {
        m.params.get_mut(name).fill(0.0);
    }
    assert!(embed(&m, &e).iter().all(|&x| x == 0.0));
}

#[test]
fn embeddings_are_local_and_pure() {
    let (vocab, e) = tiny_input(3);
    let m = Model::new(ModelConfig::tiny(), vocab.len(), 2);
    let base = embed(&m, &e);
    assert_eq!(base, embed(&m, &e));
    // Find a position with a concrete value and flip one byte.
    let p = (0..e.len()).find(|&i| e.values[i] != DUMMY_VALUE).unwrap();
    let mut e2 = e.clone();
    e2.values[p][7] ^= 1;
    let changed = embed(&m, &e2);
    for i in 0..e.len() {
        let same = base.row(i) == changed.row(i);
        assert_eq!(same, i != p || e.values[i] == e2.values[i], "row {i}");
    }
    // Same five ids at two positions give the same row.
    let mut e3 = e.clone();
    let q = e.len() - 1;
    e3.tokens[0] = e3.tokens[q];
    e3.values[0] = e3.values[q];
    e3.instr_pos[0] = e3.instr_pos[q];
    e3.operand_pos[0] = e3.operand_pos[q];
    let x = embed(&m, &e3);
    assert_eq!(x.row(0), x.row(q));
}

#[test]
fn value_combiners() {
    let mut cfg = ModelConfig::tiny();
    cfg.value_combiner = ValueCombiner::Sum;
    let mut m = Model::new(cfg.clone(), 5, 3);
    // One-hot byte embeddings over the first d_emb byte values.
    let mut table = Array2::zeros((257, cfg.d_emb));
    for b in 0..cfg.d_emb {
        table[[b, b]] = 1.0;
    }
    *m.params.get_mut("value.byte") = table;
    let seqs = [[0, 0, 1, 3, 3, 3, 7, 2], [3, 2, 7, 3, 0, 1, 0, 3]];
    let mut tape = Tape::new();
    let v = m.value_encoder(&mut tape, &seqs);
    let v = tape.value(v);
    assert_eq!(v.row(0), array![2.0, 1.0, 1.0, 3.0, 0.0, 0.0, 0.0, 1.0]);
    assert_eq!(v.row(0), v.row(1));

    cfg.value_combiner = ValueCombiner::Bilstm;
    let m = Model::new(cfg.clone(), 5, 3);
    let mut tape = Tape::new();
    let seqs = [seqs[0], seqs[1], DUMMY_VALUE, DUMMY_VALUE];
    let v = m.value_encoder(&mut tape, &seqs);
    let v = tape.value(v);
    assert_ne!(v.row(0), v.row(1));
    assert_eq!(v.row(2), v.row(3));

    cfg.value_combiner = ValueCombiner::Mlp;
    let m = Model::new(cfg, 5, 3);
    let mut tape = Tape::new();
    let v = m.value_encoder(&mut tape, &seqs);
    assert_eq!(tape.value(v).dim(), (4, 8));
}

#[test]
fn single_token_attends_to_itself() {
    let mut tape = Tape::new();
    let q = tape.input(array![[0.3, -1.0]]);
    let v = tape.input(array![[2.0, 5.0]]);
    let o = tape.attention(q, q, v, vec![0..1], 0.5);
    assert_eq!(tape.value(o), &array![[2.0, 5.0]]);
    assert_eq!(tape.attention_probs(o).unwrap()[0], array![[1.0]]);
}

#[test]
fn two_token_attention_closed_form() {
    // q = k = [[1, 0], [0, 1]], v = [[1, 2], [3, 4]], d_emb = 2.
    let mut tape = Tape::new();
    let q = tape.input(array![[1.0, 0.0], [0.0, 1.0]]);
    let v = tape.input(array![[1.0, 2.0], [3.0, 4.0]]);
    let s = 1.0 / 2f64.sqrt();
    let o = tape.attention(q, q, v, vec![0..2], s);
    // Row 0 logits (s, 0): weight on itself is 1 / (1 + e^-s).
    let w = 1.0 / (1.0 + (-s).exp());
    let expect = array![[w + 3.0 * (1.0 - w), 2.0 * w + 4.0 * (1.0 - w)], [(1.0 - w) + 3.0 * w, 2.0 * (1.0 - w) + 4.0 * w]];
    let got = tape.value(o);
    for (a, b) in got.iter().zip(expect.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
    for p in tape.attention_probs(o).unwrap() {
        for r in p.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn forward_shapes_uniformity_and_determinism() {
    let (vocab, data) = corpus(4);
    let m = Model::new(ModelConfig::desk(), vocab.len(), 5);
    let masked = apply_mask(&data[0], 0.15, &WINDOW_CHOICES, 1);
    let run = || {
        let mut tape = Tape::new();
        let g = m.pretrain_graph(&mut tape, &[&masked], None);
        let code = tape.value(g.outputs.code_logits).clone();
        let bytes: Vec<Array2<f64>> = g.outputs.byte_logits.iter().map(|b| tape.value(*b).clone()).collect();
        (code, bytes)
    };
    let (code, bytes) = run();
    let mp = masked.positions.len();
    assert_eq!(code.dim(), (mp, vocab.len()));
    assert_eq!(bytes.len(), 8);
    for b in &bytes {
        assert_eq!(b.dim(), (mp, 257));
    }
    assert_eq!(run(), (code.clone(), bytes));
    let p = tape::softmax_rows(code.view(), vocab.len());
    let u = 1.0 / vocab.len() as f64;
    assert!(p.iter().all(|&x| (x - u).abs() < 0.5 * u), "{p:?}");
}

#[test]
fn pretrain_loss_arithmetic() {
    let bytes = [Some(1.0); 8];
    assert!((pretrain_loss(&[2.0], &[bytes], 0.125) - 3.0).abs() < 1e-12);
    // alpha * 8 byte terms weigh the same as one code term.
    assert!((pretrain_loss(&[1.0], &[[Some(1.0); 8]], 0.125) - 2.0).abs() < 1e-12);
    assert_eq!(pretrain_loss(&[1.5, 0.5], &[[None; 8], [None; 8]], 0.125), 2.0);
}

#[test]
fn graph_loss_matches_formula() {
    let (vocab, data) = corpus(3);
    let m = Model::new(ModelConfig::tiny(), vocab.len(), 6);
    let masked = apply_mask(&data[1], 0.3, &WINDOW_CHOICES, 2);
    let mut tape = Tape::new();
    let g = m.pretrain_graph(&mut tape, &[&masked], None);
    let code = tape::softmax_rows(tape.value(g.outputs.code_logits).view(), vocab.len());
    let bytes: Vec<_> = g
        .outputs
        .byte_logits
        .iter()
        .map(|b| tape::softmax_rows(tape.value(*b).view(), BYTE_CLASSES))
        .collect();
    let code_ce: Vec<f64> = g
        .code_targets
        .iter()
        .enumerate()
        .map(|(i, t)| -code[[i, t.unwrap()]].ln())
        .collect();
    let byte_ce: Vec<[Option<f64>; 8]> = (0..code_ce.len())
        .map(|i| std::array::from_fn(|j| g.byte_targets[j][i].map(|t| -bytes[j][[i, t]].ln())))
        .collect();
    let expect = pretrain_loss(&code_ce, &byte_ce, 0.125) / code_ce.len() as f64;
    assert!((tape.scalar(g.loss) - expect).abs() < 1e-12);
}

#[test]
fn gradients_match_finite_differences() {
    let (vocab, data) = corpus(2);
    for combiner in [ValueCombiner::Bilstm, ValueCombiner::Mlp, ValueCombiner::Sum] {
        let cfg = ModelConfig {
            value_combiner: combiner,
            ..ModelConfig::tiny()
        };
        let m = Model::new(cfg, vocab.len(), 7);
        let e = &data[0];
        let mut short = e.clone();
        let n = 6.min(e.len());
        short.tokens.truncate(n);
        short.values.truncate(n);
        short.instr_pos.truncate(n);
        short.operand_pos.truncate(n);
        short.arch.truncate(n);
        let masked = MaskedInput::at(&short, &[1, 2, 4]);
        let checks = check_gradients(&m.params, 1e-6, |tape, p| {
            let mm = Model {
                params: p.clone(),
                ..m.clone()
            };
            mm.pretrain_graph(tape, &[&masked], None).loss
        });
        for c in &checks {
            assert!(c.rel_error < 1e-4, "{combiner}: {} {}", c.name, c.rel_error);
        }
    }
}

#[test]
fn unused_heads_get_zero_gradient() {
    let (vocab, e) = tiny_input(3);
    let m = Model::new(ModelConfig::tiny(), vocab.len(), 8);
    // Mask only opcode/punctuation positions: no byte targets.
    let p: Vec<usize> = (0..e.len()).filter(|&i| e.values[i] == DUMMY_VALUE).collect();
    let masked = MaskedInput::at(&e, &p);
    let mut tape = Tape::new();
    let g = m.pretrain_graph(&mut tape, &[&masked], None);
    let grads = tape.backward(g.loss, m.params.len());
    let w2 = m.params.index("head.byte3.w2");
    assert!(grads.0[w2].as_ref().is_none_or(|g| g.iter().all(|&x| x == 0.0)));
    let code = m.params.index("head.code.w2");
    assert!(grads.0[code].as_ref().unwrap().iter().any(|&x| x != 0.0));
    assert!(grads.0[m.params.index("sim.w1")].is_none());
}

#[test]
fn confident_correct_predictions_give_tiny_gradients() {
    let (vocab, e) = tiny_input(3);
    let mut m = Model::new(ModelConfig::tiny(), vocab.len(), 9);
    let masked = MaskedInput::at(&e, &[0]);
    let target = e.tokens[0] as usize;
    m.params.get_mut("head.code.w2").fill(0.0);
    m.params.get_mut("head.code.b2")[[0, target]] = 60.0;
    let byte_pos = e.values[0];
    for j in 0..8 {
        m.params.get_mut(&format!("head.byte{j}.w2")).fill(0.0);
        m.params.get_mut(&format!("head.byte{j}.b2"))[[0, byte_pos[j] as usize]] = 60.0;
    }
    let mut tape = Tape::new();
    let g = m.pretrain_graph(&mut tape, &[&masked], None);
    assert!(tape.scalar(g.loss) < 1e-20);
    let grads = tape.backward(g.loss, m.params.len());
    for gr in grads.0.iter().flatten() {
        assert!(gr.iter().all(|x| x.abs() < 1e-20));
    }
}

#[test]
fn perplexity_reference_points() {
    let (vocab, data) = corpus(3);
    let mut m = Model::new(ModelConfig::tiny(), vocab.len(), 10);
    for name in std::iter::once("head.code".to_string()).chain((0..8).map(|j| format!("head.byte{j}"))) {
        m.params.get_mut(&format!("{name}.w2")).fill(0.0);
        m.params.get_mut(&format!("{name}.b2")).fill(0.0);
    }
    let masked: Vec<MaskedInput> = data
        .iter()
        .enumerate()
        .map(|(i, e)| apply_mask(e, 0.2, &WINDOW_CHOICES, i as u64))
        .collect();
    let p = perplexity(&m, &masked);
    assert!((p.byte - 256.0).abs() < 1e-9, "{}", p.byte);
    assert!((p.code - vocab.len() as f64).abs() < 1e-9);

    // A single-token corpus with an overwhelming bias is predicted perfectly.
    let ret = parse_function("ret", Dialect::ArchA).unwrap();
    let t = dummy_trace(&ret);
    let v = build_vocab([&t]);
    let e = tokenize_trace(&t, &v).unwrap();
    let mut m = Model::new(ModelConfig::tiny(), v.len(), 11);
    m.params.get_mut("head.code.w2").fill(0.0);
    m.params.get_mut("head.code.b2")[[0, 3]] = 100.0;
    let p = perplexity(&m, &[MaskedInput::at(&e, &[0])]);
    assert!((p.code - 1.0).abs() < 1e-12);
    assert!(p.byte.is_nan());
}

#[test]
fn swapping_instructions_changes_embeddings() {
    let f = parse_function("r1 := r2 + 0x3\nr4 := r5\nret", Dialect::ArchA).unwrap();
    let g = parse_function("r4 := r5\nr1 := r2 + 0x3\nret", Dialect::ArchA).unwrap();
    let (tf, tg) = (dummy_trace(&f), dummy_trace(&g));
    let vocab = build_vocab([&tf, &tg]);
    let m = Model::new(ModelConfig::tiny(), vocab.len(), 12);
    let ef = tokenize_trace(&tf, &vocab).unwrap();
    let eg = tokenize_trace(&tg, &vocab).unwrap();
    let mut tape = Tape::new();
    let v = m.function_embeddings(&mut tape, &[vec![ef], vec![eg]]);
    let v = tape.value(v);
    assert_ne!(v.row(0), v.row(1));
}

#[test]
fn training_reduces_loss_and_is_deterministic() {
    let (vocab, data) = corpus(10);
    let data: Vec<EncodedInput> = data.into_iter().take(50).collect();
    let cfg = TrainConfig {
        epochs: 40,
        batch_size: 10,
        lr: 3e-3,
        seed: 3,
        ..TrainConfig::default()
    };
    let train = || {
        let mut m = Model::new(ModelConfig::tiny(), vocab.len(), 13);
        let h = pretrain(&mut m, &data, &cfg, |_, _| {}).unwrap();
        (m, h)
    };
    let (m1, h1) = train();
    let steps = h1.len() * data.len().div_ceil(10);
    assert!(steps >= 200);
    assert!(h1.last().unwrap().mean_loss < 0.8 * h1[1].mean_loss, "{h1:?}");
    let (m2, h2) = train();
    assert_eq!(h1, h2);
    assert_eq!(m1.params, m2.params);
}

#[test]
fn first_step_uses_warmup_rate() {
    let (vocab, data) = corpus(2);
    let mut m = Model::new(ModelConfig::tiny(), vocab.len(), 14);
    let t = Trainer::new(&m, AdamConfig::default(), 1e-3, 10, 1);
    assert_eq!(t.lr(), 1e-7);
    let mut lrs = vec![];
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        ..TrainConfig::default()
    };
    pretrain(&mut m, &data, &cfg, |s, _| lrs.push(s.lr)).unwrap();
    assert!(lrs[0] < lrs[1]);
    assert_eq!(lrs[1], 1e-3);
}

#[test]
fn dropout_only_in_training_mode() {
    let (vocab, data) = corpus(2);
    let m = Model::new(ModelConfig::desk(), vocab.len(), 15);
    let run = |rng: Option<&mut ChaCha8Rng>| {
        let mut tape = Tape::new();
        let enc = m.encode(&mut tape, &[&data[0]], rng);
        tape.value(enc.hidden).clone()
    };
    assert_eq!(run(None), run(None));
    let mut r = ChaCha8Rng::seed_from_u64(1);
    assert_ne!(run(None), run(Some(&mut r)));
}
