//! Reverse-mode differentiation over 2-D `f64` arrays.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! walks it in reverse and returns gradients for the parameters that the
//! loss actually reached.

use std::ops::Range;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use super::params::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Rows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    SegmentMean(Var, Vec<Range<usize>>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Range<usize>>,
        scale: f64,
        probs: Vec<Array2<f64>>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        classes: usize,
        weight: f64,
        probs: Array2<f64>,
    },
    Cosine {
        a: Var,
        b: Var,
        labels: Vec<f64>,
        margin: f64,
        weight: f64,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed like the [`ParamSet`] they came from; `None` marks a
/// parameter the loss never reached.
pub struct Gradients(pub Vec<Option<Array2<f64>>>);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Row-wise softmax over the first `classes` columns.
pub fn softmax_rows(x: ArrayView2<f64>, classes: usize) -> Array2<f64> {
    let mut out = x.slice(s![.., ..classes]).to_owned();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
    }
    out
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, params: &ParamSet, index: usize) -> Var {
        self.push(params.values[index].clone(), Op::Param(index))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// `x + b` with `b` a single row broadcast over `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let v = self.value(x) + self.value(b);
        self.push(v, Op::AddRow(x, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    /// Gathers rows; gradients scatter-add back.
    pub fn rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let v = self.value(a).select(Axis(0), &idx);
        self.push(v, Op::Rows(a, idx))
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(v, Op::ConcatCols(parts))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start, end))
    }

    /// One output row per segment: the mean of that segment's rows.
    pub fn segment_mean(&mut self, a: Var, segments: Vec<Range<usize>>) -> Var {
        let x = self.value(a);
        let mut v = Array2::zeros((segments.len(), x.ncols()));
        for (i, r) in segments.iter().enumerate() {
            let m = x.slice(s![r.clone(), ..]).mean_axis(Axis(0)).expect("non-empty segment");
            v.row_mut(i).assign(&m);
        }
        self.push(v, Op::SegmentMean(a, segments))
    }

    /// Scaled dot-product attention applied independently inside each
    /// row segment: `softmax(q k^T * scale) v`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, segments: Vec<Range<usize>>, scale: f64) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = Array2::zeros((qv.nrows(), vv.ncols()));
        let mut probs = Vec::with_capacity(segments.len());
        for r in &segments {
            let qs = qv.slice(s![r.clone(), ..]);
            let ks = kv.slice(s![r.clone(), ..]);
            let logits = qs.dot(&ks.t()) * scale;
            let p = softmax_rows(logits.view(), logits.ncols());
            out.slice_mut(s![r.clone(), ..])
                .assign(&p.dot(&vv.slice(s![r.clone(), ..])));
            probs.push(p);
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                segments,
                scale,
                probs,
            },
        )
    }

    /// Attention weights recorded by an [`attention`](Self::attention) node.
    pub fn attention_probs(&self, a: Var) -> Option<&[Array2<f64>]> {
        match &self.nodes[a.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// `weight * sum_i -log softmax(logits_i[..classes])[target_i]` over rows
    /// with a target. Columns past `classes` take no part.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Option<usize>>, classes: usize, weight: f64) -> Var {
        let probs = softmax_rows(self.value(logits).view(), classes);
        let mut total = 0.0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                total -= probs[[i, t]].max(f64::MIN_POSITIVE).ln();
            }
        }
        let v = Array2::from_elem((1, 1), weight * total);
        self.push(
            v,
            Op::CrossEntropy {
                logits,
                targets,
                classes,
                weight,
                probs,
            },
        )
    }

    /// `weight * sum_i l(a_i, b_i, y_i)` with `l = 1 - cos` for `y = 1` and
    /// `max(0, cos - margin)` for `y = -1`.
    pub fn cosine_loss(&mut self, a: Var, b: Var, labels: Vec<f64>, margin: f64, weight: f64) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let c = row_cosine(av.row(i).as_slice().unwrap(), bv.row(i).as_slice().unwrap());
            total += if y > 0.0 { 1.0 - c } else { (c - margin).max(0.0) };
        }
        let v = Array2::from_elem((1, 1), weight * total);
        self.push(
            v,
            Op::Cosine {
                a,
                b,
                labels,
                margin,
                weight,
            },
        )
    }

    /// Gradients of the scalar `loss` with respect to every parameter node.
    pub fn backward(&self, loss: Var, n_params: usize) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones(self.nodes[loss.0].value.raw_dim()));
        let mut out: Vec<Option<Array2<f64>>> = (0..n_params).map(|_| None).collect();

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(x) => *x += &g,
                slot => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(p) => match &mut out[*p] {
                    Some(x) => *x += &g,
                    slot => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(x, b) => {
                    acc(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *x, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::Tanh(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(&node.value).for_each(|d, &y| *d *= 1.0 - y * y);
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(&node.value).for_each(|d, &y| *d *= y * (1.0 - y));
                    acc(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|d, &x| *d *= gelu_grad(x));
                    acc(&mut grads, *a, ga);
                }
                Op::Rows(a, idx) => {
                    let mut ga = Array2::zeros(self.value(*a).raw_dim());
                    for (r, &j) in idx.iter().enumerate() {
                        let mut row = ga.row_mut(j);
                        row += &g.row(r);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        acc(&mut grads, *p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let mut ga = Array2::zeros(self.value(*a).raw_dim());
                    ga.slice_mut(s![.., *start..*end]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::SegmentMean(a, segments) => {
                    let mut ga = Array2::zeros(self.value(*a).raw_dim());
                    for (k, r) in segments.iter().enumerate() {
                        let share = &g.row(k) / r.len() as f64;
                        for j in r.clone() {
                            ga.row_mut(j).assign(&share);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    segments,
                    scale,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let mut gq = Array2::zeros(qv.raw_dim());
                    let mut gk = Array2::zeros(kv.raw_dim());
                    let mut gv = Array2::zeros(vv.raw_dim());
                    for (r, p) in segments.iter().zip(probs) {
                        let go = g.slice(s![r.clone(), ..]);
                        gv.slice_mut(s![r.clone(), ..]).assign(&p.t().dot(&go));
                        let dp = go.dot(&vv.slice(s![r.clone(), ..]).t());
                        // Softmax backward, row by row.
                        let dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
                        let ds = p * &(&dp - &dot) * *scale;
                        gq.slice_mut(s![r.clone(), ..])
                            .assign(&ds.dot(&kv.slice(s![r.clone(), ..])));
                        gk.slice_mut(s![r.clone(), ..])
                            .assign(&ds.t().dot(&qv.slice(s![r.clone(), ..])));
                    }
                    acc(&mut grads, *q, gq);
                    acc(&mut grads, *k, gk);
                    acc(&mut grads, *v, gv);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    classes,
                    weight,
                    probs,
                } => {
                    let up = g[[0, 0]] * weight;
                    let mut gl = Array2::zeros(self.value(*logits).raw_dim());
                    for (i, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            for c in 0..*classes {
                                gl[[i, c]] = up * probs[[i, c]];
                            }
                            gl[[i, t]] -= up;
                        }
                    }
                    acc(&mut grads, *logits, gl);
                }
                Op::Cosine {
                    a,
                    b,
                    labels,
                    margin,
                    weight,
                } => {
                    let up = g[[0, 0]] * weight;
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = Array2::zeros(av.raw_dim());
                    let mut gb = Array2::zeros(bv.raw_dim());
                    for (i, &y) in labels.iter().enumerate() {
                        let (ar, br) = (av.row(i), bv.row(i));
                        let na = ar.dot(&ar).sqrt();
                        let nb = br.dot(&br).sqrt();
                        let c = ar.dot(&br) / (na * nb);
                        let dl = if y > 0.0 {
                            -1.0
                        } else if c > *margin {
                            1.0
                        } else {
                            0.0
                        };
                        if dl == 0.0 {
                            continue;
                        }
                        let s = up * dl;
                        ga.row_mut(i)
                            .assign(&((&br / (na * nb) - &ar * (c / (na * na))) * s));
                        gb.row_mut(i)
                            .assign(&((&ar / (na * nb) - &br * (c / (nb * nb))) * s));
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
            }
        }
        Gradients(out)
    }
}

pub fn row_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

impl Gradients {
    /// Name of the first parameter with a non-finite gradient entry.
    pub fn first_non_finite<'a>(&self, params: &'a ParamSet) -> Option<&'a str> {
        self.0.iter().enumerate().find_map(|(i, g)| {
            g.as_ref()
                .filter(|g| g.iter().any(|x| !x.is_finite()))
                .map(|_| params.names[i].as_str())
        })
    }

    pub fn add_assign(&mut self, other: Gradients) {
        for (a, b) in self.0.iter_mut().zip(other.0) {
            match (a.as_mut(), b) {
                (Some(x), Some(y)) => *x += &y,
                (None, Some(y)) => *a = Some(y),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.0.iter_mut().flatten() {
            *g *= c;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn check_grad(build: impl Fn(&mut Tape, &ParamSet) -> Var, params: &ParamSet) {
        let mut tape = Tape::new();
        let loss = build(&mut tape, params);
        let grads = tape.backward(loss, params.len());
        let h = 1e-6;
        for (p, g) in grads.0.iter().enumerate() {
            let g = g.as_ref().expect("reached");
            for idx in 0..g.len() {
                let mut plus = params.clone();
                let mut minus = params.clone();
                plus.values[p].as_slice_mut().unwrap()[idx] += h;
                minus.values[p].as_slice_mut().unwrap()[idx] -= h;
                let mut t1 = Tape::new();
                let l1 = build(&mut t1, &plus);
                let f1 = t1.scalar(l1);
                let mut t2 = Tape::new();
                let l2 = build(&mut t2, &minus);
                let f2 = t2.scalar(l2);
                let num = (f1 - f2) / (2.0 * h);
                let ana = g.as_slice().unwrap()[idx];
                assert!(
                    (num - ana).abs() <= 1e-6 * (1.0 + num.abs()),
                    "param {p} entry {idx}: numeric {num} analytic {ana}"
                );
            }
        }
    }

    fn set(values: Vec<Array2<f64>>) -> ParamSet {
        let mut p = ParamSet::default();
        for (i, v) in values.into_iter().enumerate() {
            p.push(format!("p{i}"), v);
        }
        p
    }

    #[test]
    fn elementwise_and_matmul_gradients() {
        let params = set(vec![
            array![[0.3, -0.2, 0.5], [0.1, 0.4, -0.6]],
            array![[0.2, -0.1], [0.7, 0.3], [-0.4, 0.5]],
            array![[0.05, -0.02]],
        ]);
        check_grad(
            |t, p| {
                let a = t.param(p, 0);
                let b = t.param(p, 1);
                let c = t.param(p, 2);
                let x = t.matmul(a, b);
                let x = t.add_row(x, c);
                let y = t.gelu(x);
                let z = t.sigmoid(x);
                let w = t.mul(y, z);
                let u = t.tanh(w);
                let u = t.scale(u, 1.7);
                let v = t.concat_cols(vec![u, x]);
                let v = t.slice_cols(v, 1, 4);
                let r = t.rows(v, vec![1, 0, 1]);
                t.cross_entropy(r, vec![Some(2), None, Some(0)], 3, 0.5)
            },
            &params,
        );
    }

    #[test]
    fn attention_and_pooling_gradients() {
        let params = set(vec![
            array![[0.3, -0.2], [0.1, 0.4], [-0.5, 0.2], [0.6, 0.1], [0.0, -0.3]],
            array![[0.2, 0.9], [-0.4, 0.1]],
        ]);
        check_grad(
            |t, p| {
                let x = t.param(p, 0);
                let w = t.param(p, 1);
                let q = t.matmul(x, w);
                let o = t.attention(q, x, x, vec![0..3, 3..5], 0.7);
                let m = t.segment_mean(o, vec![0..3, 3..5]);
                let a = t.rows(m, vec![0, 0]);
                let b = t.rows(m, vec![1, 1]);
                let q2 = t.rows(q, vec![0, 4]);
                let b2 = t.add(b, q2);
                t.cosine_loss(a, b2, vec![1.0, -1.0], -0.9, 1.0)
            },
            &params,
        );
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = array![[1.0, 2.0, 3.0], [-50.0, 0.0, 50.0]];
        let p = softmax_rows(x.view(), 3);
        for r in p.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
        let p = softmax_rows(x.view(), 2);
        assert_eq!(p.ncols(), 2);
    }

    #[test]
    fn unreached_parameters_have_no_gradient() {
        let params = set(vec![array![[1.0]], array![[2.0]]]);
        let mut t = Tape::new();
        let a = t.param(&params, 0);
        let _b = t.param(&params, 1);
        let l = t.scale(a, 3.0);
        let g = t.backward(l, 2);
        assert_eq!(g.0[0].as_ref().unwrap()[[0, 0]], 3.0);
        assert!(g.0[1].is_none());
    }
}
