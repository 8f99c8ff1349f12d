//! Two interpreters for the network's layer vocabulary.
//!
//! [`Eager`] computes values and drops intermediates as soon as they go out of
//! scope; [`Tape`] records every op so [`Tape::backward`] can run reverse-mode
//! differentiation. Model code is written once against [`Graph`].

use std::rc::Rc;

use crate::kernels;
use crate::tensor::{FeatureMap, Scalar};

pub trait Graph<S: Scalar> {
    type Var: Clone;

    /// The parameter with index `id` in the bound parameter set.
    fn param(&mut self, id: usize) -> Self::Var;
    fn constant(&mut self, x: FeatureMap<S>) -> Self::Var;
    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a FeatureMap<S>;

    /// Same-padded stride-1 convolution; kernel size is read from `w`.
    fn conv(&mut self, x: &Self::Var, w: &Self::Var, b: &Self::Var) -> Self::Var;
    fn prelu(&mut self, x: &Self::Var, slope: &Self::Var) -> Self::Var;
    fn relu(&mut self, x: &Self::Var) -> Self::Var;
    fn sigmoid(&mut self, x: &Self::Var) -> Self::Var;
    fn maxpool2(&mut self, x: &Self::Var) -> Self::Var;
    fn concat(&mut self, xs: &[&Self::Var]) -> Self::Var;
    fn slice_channels(&mut self, x: &Self::Var, start: usize, len: usize) -> Self::Var;
    fn mul(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var;
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var;
    /// Multiplies `x` by the single element of the 1x1x1 map `s`.
    fn scale(&mut self, x: &Self::Var, s: &Self::Var) -> Self::Var;
}

fn slice_of<S: Scalar>(x: &FeatureMap<S>, start: usize, len: usize) -> FeatureMap<S> {
    let p = x.plane();
    FeatureMap::from_vec(len, x.height(), x.width(), x.data()[start * p..(start + len) * p].to_vec())
        .expect("slice within bounds")
}

fn scalar_of<S: Scalar>(s: &FeatureMap<S>) -> S {
    assert_eq!(s.len(), 1, "scale factor must be a single element");
    s.data()[0]
}

/// Forward-only evaluation over a borrowed parameter set.
pub struct Eager<'p, S> {
    params: &'p [FeatureMap<S>],
}

#[derive(Clone)]
pub enum EagerVar<S> {
    Param(usize),
    Owned(Rc<FeatureMap<S>>),
}

impl<'p, S: Scalar> Eager<'p, S> {
    pub fn new(params: &'p [FeatureMap<S>]) -> Self {
        Self { params }
    }

    fn get<'a>(&'a self, v: &'a EagerVar<S>) -> &'a FeatureMap<S> {
        match v {
            EagerVar::Param(i) => &self.params[*i],
            EagerVar::Owned(x) => x,
        }
    }

    fn own(x: FeatureMap<S>) -> EagerVar<S> {
        EagerVar::Owned(Rc::new(x))
    }
}

impl<S: Scalar> Graph<S> for Eager<'_, S> {
    type Var = EagerVar<S>;

    fn param(&mut self, id: usize) -> Self::Var {
        EagerVar::Param(id)
    }

    fn constant(&mut self, x: FeatureMap<S>) -> Self::Var {
        Self::own(x)
    }

    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a FeatureMap<S> {
        self.get(v)
    }

    fn conv(&mut self, x: &Self::Var, w: &Self::Var, b: &Self::Var) -> Self::Var {
        Self::own(kernels::conv2d(self.get(x), self.get(w), self.get(b)))
    }

    fn prelu(&mut self, x: &Self::Var, slope: &Self::Var) -> Self::Var {
        Self::own(kernels::prelu(self.get(x), self.get(slope)))
    }

    fn relu(&mut self, x: &Self::Var) -> Self::Var {
        Self::own(kernels::relu(self.get(x)))
    }

    fn sigmoid(&mut self, x: &Self::Var) -> Self::Var {
        Self::own(kernels::sigmoid(self.get(x)))
    }

    fn maxpool2(&mut self, x: &Self::Var) -> Self::Var {
        Self::own(kernels::maxpool2(self.get(x)).0)
    }

    fn concat(&mut self, xs: &[&Self::Var]) -> Self::Var {
        let maps: Vec<&FeatureMap<S>> = xs.iter().map(|v| self.get(v)).collect();
        Self::own(kernels::concat_channels(&maps))
    }

    fn slice_channels(&mut self, x: &Self::Var, start: usize, len: usize) -> Self::Var {
        Self::own(slice_of(self.get(x), start, len))
    }

    fn mul(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var {
        Self::own(self.get(a).zip_map(self.get(b), |p, q| p * q))
    }

    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var {
        Self::own(self.get(a).zip_map(self.get(b), |p, q| p + q))
    }

    fn scale(&mut self, x: &Self::Var, s: &Self::Var) -> Self::Var {
        let k = scalar_of(self.get(s));
        Self::own(self.get(x).map(|v| v * k))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    Conv { x: usize, w: usize, b: usize },
    Prelu { x: usize, slope: usize },
    Relu(usize),
    Sigmoid(usize),
    MaxPool { x: usize, argmax: Vec<u32> },
    Concat(Vec<usize>),
    Slice { x: usize, start: usize },
    Mul(usize, usize),
    Add(usize, usize),
    Scale { x: usize, s: usize },
    MeanAbs { pred: usize, target: FeatureMap<S>, smoothing: Option<S> },
    Sum(Vec<usize>),
}

enum Value<S> {
    Param(usize),
    Owned(FeatureMap<S>),
}

struct Node<S> {
    value: Value<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Recording interpreter with reverse-mode gradients.
///
/// Each parameter maps to a single node no matter how often it is used, so
/// gradients from weight-shared uses (every feedback step) sum into one slot.
pub struct Tape<'p, S> {
    params: &'p [FeatureMap<S>],
    trainable: &'p [bool],
    param_nodes: Vec<Option<usize>>,
    nodes: Vec<Node<S>>,
}

impl<'p, S: Scalar> Tape<'p, S> {
    pub fn new(params: &'p [FeatureMap<S>], trainable: &'p [bool]) -> Self {
        assert_eq!(params.len(), trainable.len());
        Self {
            params,
            trainable,
            param_nodes: vec![None; params.len()],
            nodes: Vec::new(),
        }
    }

    fn get(&self, i: usize) -> &FeatureMap<S> {
        match &self.nodes[i].value {
            Value::Param(p) => &self.params[*p],
            Value::Owned(x) => x,
        }
    }

    fn push(&mut self, value: FeatureMap<S>, op: Op<S>, inputs: &[usize]) -> Var {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `mean(phi(pred - target))` with `phi = |.|`, or `sqrt(d^2 + eps^2)` when smoothed.
    pub fn mean_abs_error(&mut self, pred: &Var, target: &FeatureMap<S>, smoothing: Option<S>) -> Var {
        let p = self.get(pred.0);
        assert!(p.same_shape(target), "loss target shape mismatch");
        let n = S::of(p.len() as f64);
        let total: S = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| {
                let d = a - b;
                match smoothing {
                    Some(eps) => (d * d + eps * eps).sqrt(),
                    None => d.abs(),
                }
            })
            .sum();
        let op = Op::MeanAbs {
            pred: pred.0,
            target: target.clone(),
            smoothing,
        };
        self.push(FeatureMap::full(1, 1, 1, total / n), op, &[pred.0])
    }

    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let mut acc = self.get(xs[0].0).clone();
        for x in &xs[1..] {
            acc.add_assign(self.get(x.0));
        }
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        self.push(acc, Op::Sum(ids.clone()), &ids)
    }

    /// Hash of every piecewise branch taken: activation signs, max-pool winners and
    /// loss residual signs. Equal hashes on both sides of a finite-difference
    /// interval mean the recorded function is smooth across it.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        let signs = |h: &mut std::collections::hash_map::DefaultHasher, x: &FeatureMap<S>| {
            for v in x.data() {
                (*v > S::zero()).hash(h);
            }
        };
        for node in &self.nodes {
            match &node.op {
                Op::Prelu { x, .. } | Op::Relu(x) => signs(&mut h, self.get(*x)),
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                Op::MeanAbs { pred, target, .. } => {
                    for (a, b) in self.get(*pred).data().iter().zip(target.data()) {
                        (*a > *b).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Gradients of the scalar `output` w.r.t. every trainable parameter that influenced it.
    pub fn backward(&self, output: &Var) -> Vec<Option<FeatureMap<S>>> {
        assert_eq!(self.get(output.0).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<FeatureMap<S>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(FeatureMap::full(1, 1, 1, S::one()));
        let mut param_grads: Vec<Option<FeatureMap<S>>> = vec![None; self.params.len()];

        let nodes = &self.nodes;
        let wants = |i: usize| nodes[i].needs_grad;
        fn acc<S: Scalar>(grads: &mut [Option<FeatureMap<S>>], i: usize, g: FeatureMap<S>) {
            match &mut grads[i] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &nodes[i].op {
                Op::Leaf => {
                    if let Value::Param(p) = nodes[i].value {
                        param_grads[p] = Some(g);
                    }
                }
                Op::Conv { x, w, b } => {
                    let r = kernels::conv2d_backward(self.get(*x), self.get(*w), &g, [wants(*x), wants(*w), wants(*b)]);
                    if let Some(dx) = r.dx {
                        acc(&mut grads, *x, dx);
                    }
                    if let Some(dw) = r.dw {
                        acc(&mut grads, *w, dw);
                    }
                    if let Some(db) = r.db {
                        acc(&mut grads, *b, db);
                    }
                }
                Op::Prelu { x, slope } => {
                    let (dx, ds) = kernels::prelu_backward(self.get(*x), self.get(*slope), &g);
                    if wants(*x) {
                        acc(&mut grads, *x, dx);
                    }
                    if wants(*slope) {
                        acc(&mut grads, *slope, ds);
                    }
                }
                Op::Relu(x) => {
                    let dx = self.get(*x).zip_map(&g, |v, d| if v > S::zero() { d } else { S::zero() });
                    acc(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let dx = self.get(i).zip_map(&g, |y, d| d * y * (S::one() - y));
                    acc(&mut grads, *x, dx);
                }
                Op::MaxPool { x, argmax } => {
                    let src = self.get(*x);
                    let mut dx = FeatureMap::zeros(src.channels(), src.height(), src.width());
                    for (&k, &d) in argmax.iter().zip(g.data()) {
                        dx.data_mut()[k as usize] += d;
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Concat(xs) => {
                    let mut start = 0;
                    for &x in xs {
                        let c = self.get(x).channels();
                        if wants(x) {
                            acc(&mut grads, x, slice_of(&g, start, c));
                        }
                        start += c;
                    }
                }
                Op::Slice { x, start } => {
                    let src = self.get(*x);
                    let mut dx = FeatureMap::zeros(src.channels(), src.height(), src.width());
                    let off = start * src.plane();
                    dx.data_mut()[off..off + g.len()].copy_from_slice(g.data());
                    acc(&mut grads, *x, dx);
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        acc(&mut grads, *a, g.zip_map(self.get(*b), |d, v| d * v));
                    }
                    if wants(*b) {
                        acc(&mut grads, *b, g.zip_map(self.get(*a), |d, v| d * v));
                    }
                }
                Op::Add(a, b) => {
                    if wants(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if wants(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::Scale { x, s } => {
                    let k = scalar_of(self.get(*s));
                    if wants(*s) {
                        let ds: S = g.data().iter().zip(self.get(*x).data()).map(|(&d, &v)| d * v).sum();
                        acc(&mut grads, *s, FeatureMap::full(1, 1, 1, ds));
                    }
                    if wants(*x) {
                        acc(&mut grads, *x, g.map(|d| d * k));
                    }
                }
                Op::MeanAbs { pred, target, smoothing } => {
                    let p = self.get(*pred);
                    let scale = g.data()[0] / S::of(p.len() as f64);
                    let dp = p.zip_map(target, |a, b| {
                        let d = a - b;
                        let slope = match smoothing {
                            Some(eps) => d / (d * d + *eps * *eps).sqrt(),
                            None if d > S::zero() => S::one(),
                            None if d < S::zero() => -S::one(),
                            None => S::zero(),
                        };
                        slope * scale
                    });
                    acc(&mut grads, *pred, dp);
                }
                Op::Sum(xs) => {
                    for &x in xs {
                        if wants(x) {
                            acc(&mut grads, x, g.clone());
                        }
                    }
                }
            }
        }
        param_grads
    }
}

impl<S: Scalar> Graph<S> for Tape<'_, S> {
    type Var = Var;

    fn param(&mut self, id: usize) -> Var {
        if let Some(n) = self.param_nodes[id] {
            return Var(n);
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            needs_grad: self.trainable[id],
        });
        let n = self.nodes.len() - 1;
        self.param_nodes[id] = Some(n);
        Var(n)
    }

    fn constant(&mut self, x: FeatureMap<S>) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(x),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a FeatureMap<S> {
        self.get(v.0)
    }

    fn conv(&mut self, x: &Var, w: &Var, b: &Var) -> Var {
        let y = kernels::conv2d(self.get(x.0), self.get(w.0), self.get(b.0));
        self.push(y, Op::Conv { x: x.0, w: w.0, b: b.0 }, &[x.0, w.0, b.0])
    }

    fn prelu(&mut self, x: &Var, slope: &Var) -> Var {
        let y = kernels::prelu(self.get(x.0), self.get(slope.0));
        self.push(y, Op::Prelu { x: x.0, slope: slope.0 }, &[x.0, slope.0])
    }

    fn relu(&mut self, x: &Var) -> Var {
        let y = kernels::relu(self.get(x.0));
        self.push(y, Op::Relu(x.0), &[x.0])
    }

    fn sigmoid(&mut self, x: &Var) -> Var {
        let y = kernels::sigmoid(self.get(x.0));
        self.push(y, Op::Sigmoid(x.0), &[x.0])
    }

    fn maxpool2(&mut self, x: &Var) -> Var {
        let (y, argmax) = kernels::maxpool2(self.get(x.0));
        self.push(y, Op::MaxPool { x: x.0, argmax }, &[x.0])
    }

    fn concat(&mut self, xs: &[&Var]) -> Var {
        let maps: Vec<&FeatureMap<S>> = xs.iter().map(|v| self.get(v.0)).collect();
        let y = kernels::concat_channels(&maps);
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        self.push(y, Op::Concat(ids.clone()), &ids)
    }

    fn slice_channels(&mut self, x: &Var, start: usize, len: usize) -> Var {
        let y = slice_of(self.get(x.0), start, len);
        self.push(y, Op::Slice { x: x.0, start }, &[x.0])
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Var {
        let y = self.get(a.0).zip_map(self.get(b.0), |p, q| p * q);
        self.push(y, Op::Mul(a.0, b.0), &[a.0, b.0])
    }

    fn add(&mut self, a: &Var, b: &Var) -> Var {
        let y = self.get(a.0).zip_map(self.get(b.0), |p, q| p + q);
        self.push(y, Op::Add(a.0, b.0), &[a.0, b.0])
    }

    fn scale(&mut self, x: &Var, s: &Var) -> Var {
        let k = scalar_of(self.get(s.0));
        let y = self.get(x.0).map(|v| v * k);
        self.push(y, Op::Scale { x: x.0, s: s.0 }, &[x.0, s.0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_parameter_accumulates() {
        // loss = mean(|s * (s * x)|) with s used twice
        let params = vec![FeatureMap::full(1, 1, 1, 3.0f64)];
        let trainable = vec![true];
        let mut t = Tape::new(&params, &trainable);
        let x = t.constant(FeatureMap::full(1, 1, 2, 2.0));
        let s = t.param(0);
        let y1 = t.scale(&x, &s);
        let y2 = t.scale(&y1, &s);
        let loss = t.mean_abs_error(&y2, &FeatureMap::zeros(1, 1, 2), None);
        assert_eq!(t.value(&loss).data()[0], 18.0);
        let g = t.backward(&loss);
        // d/ds (2 s^2) = 4 s = 12
        assert_eq!(g[0].as_ref().unwrap().data()[0], 12.0);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let params = vec![FeatureMap::full(1, 1, 1, 3.0f64), FeatureMap::full(1, 1, 1, 2.0)];
        let trainable = vec![false, true];
        let mut t = Tape::new(&params, &trainable);
        let x = t.constant(FeatureMap::full(1, 1, 1, 1.0));
        let (a, b) = (t.param(0), t.param(1));
        let y = t.scale(&x, &a);
        let y = t.scale(&y, &b);
        let loss = t.mean_abs_error(&y, &FeatureMap::zeros(1, 1, 1), None);
        let g = t.backward(&loss);
        assert!(g[0].is_none());
        assert_eq!(g[1].as_ref().unwrap().data()[0], 3.0);
    }

    #[test]
    fn eager_and_tape_agree() {
        let params = vec![
            FeatureMap::from_fn(2, 1, 9, |c, _, k| (c as f64 - 0.5) * (k as f64 - 4.0) * 0.1),
            FeatureMap::full(2, 1, 1, 0.1),
            FeatureMap::full(2, 1, 1, 0.25),
        ];
        let input = FeatureMap::from_fn(1, 4, 4, |_, y, x| (y as f64 - x as f64) * 0.3);
        fn run<G: Graph<f64>>(g: &mut G, input: FeatureMap<f64>) -> FeatureMap<f64> {
            let x = g.constant(input);
            let (w, b, a) = (g.param(0), g.param(1), g.param(2));
            let y = g.conv(&x, &w, &b);
            let y = g.prelu(&y, &a);
            let s = g.sigmoid(&y);
            let c = g.concat(&[&y, &s]);
            let h = g.slice_channels(&c, 1, 2);
            let p = g.maxpool2(&h);
            g.value(&p).clone()
        }
        let trainable = vec![true; 3];
        let a = run(&mut Eager::new(&params), input.clone());
        let b = run(&mut Tape::new(&params, &trainable), input);
        assert_eq!(a, b);
        assert_eq!(a.shape(), [2, 2, 2]);
    }
}
