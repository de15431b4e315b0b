//! Reverse-mode accumulation over an explicitly recorded computation.
//!
//! Nodes hold dense `f64` vectors. Parameters are read straight out of the
//! bound [`ModuleParams`] stores; gradients for them are collected per store
//! during [`Tape::backward`].

use super::{check_dim, ModuleParams, NnError, ParamId, PROB_EPS};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Handle to a parameter store bound to a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param { store: usize, id: ParamId },
    Row { store: usize, id: ParamId, row: usize },
    MatVec { store: usize, id: ParamId, x: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    OneMinus(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Concat(Vec<usize>),
    Slice { x: usize, start: usize },
    Dot(usize, usize),
    Sum(usize),
    AddN(Vec<usize>),
    Softmax(usize),
    Mix { weights: usize, items: Vec<usize> },
    SoftmaxCe { logits: usize, target: usize },
    Bce { p: usize, targets: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Vec<f64>,
    /// Cached intermediate (softmax probabilities for the fused cross entropy).
    aux: Vec<f64>,
}

/// Per-store, per-tensor gradients produced by [`Tape::backward`].
///
/// Tensors that did not take part in the computation have an empty vector.
#[derive(Debug, Clone)]
pub struct Gradients {
    stores: Vec<Vec<Vec<f64>>>,
}

impl Gradients {
    pub fn store(&self, id: StoreId) -> &[Vec<f64>] {
        &self.stores[id.0]
    }

    pub fn into_store(mut self, id: StoreId) -> Vec<Vec<f64>> {
        std::mem::take(&mut self.stores[id.0])
    }
}

/// Records a computation over borrowed parameter stores.
pub struct Tape<'a> {
    stores: Vec<&'a ModuleParams>,
    nodes: Vec<Node>,
}

impl<'a> Default for Tape<'a> {
    fn default() -> Self {
        Self::new()
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

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            stores: Vec::new(),
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn bind(&mut self, params: &'a ModuleParams) -> StoreId {
        self.stores.push(params);
        StoreId(self.stores.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> Var {
        self.push_aux(op, value, Vec::new())
    }

    fn push_aux(&mut self, op: Op, value: Vec<f64>, aux: Vec<f64>) -> Var {
        self.nodes.push(Node { op, value, aux });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn width(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    pub fn input(&mut self, values: Vec<f64>) -> Var {
        self.push(Op::Input, values)
    }

    /// A whole parameter tensor as a flat vector.
    pub fn param(&mut self, store: StoreId, id: ParamId) -> Var {
        let value = self.stores[store.0].get(id).values.clone();
        self.push(Op::Param { store: store.0, id }, value)
    }

    /// One row of a matrix parameter (embedding lookup).
    pub fn row(&mut self, store: StoreId, id: ParamId, row: usize) -> Result<Var, NnError> {
        let t = self.stores[store.0].get(id);
        if row >= t.rows() {
            return Err(NnError::Dimension {
                context: format!("row lookup in `{}`", t.name),
                expected: t.rows(),
                actual: row,
            });
        }
        let value = t.row(row).to_vec();
        Ok(self.push(Op::Row { store: store.0, id, row }, value))
    }

    /// `W x` for a `rows x cols` matrix parameter `W`.
    pub fn matvec(&mut self, store: StoreId, id: ParamId, x: Var) -> Result<Var, NnError> {
        let t = self.stores[store.0].get(id);
        let (rows, cols) = (t.rows(), t.cols());
        let xv = &self.nodes[x.0].value;
        check_dim(&format!("matvec with `{}`", t.name), cols, xv.len())?;
        let mut out = vec![0.0; rows];
        for (r, o) in out.iter_mut().enumerate() {
            let w = &t.values[r * cols..(r + 1) * cols];
            *o = w.iter().zip(xv).map(|(a, b)| a * b).sum();
        }
        Ok(self.push(
            Op::MatVec {
                store: store.0,
                id,
                x: x.0,
            },
            out,
        ))
    }

    fn binary(&self, a: Var, b: Var, ctx: &str) -> Result<(), NnError> {
        check_dim(ctx, self.width(a), self.width(b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary(a, b, "add")?;
        let v = zip_map(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x + y);
        Ok(self.push(Op::Add(a.0, b.0), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary(a, b, "sub")?;
        let v = zip_map(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x - y);
        Ok(self.push(Op::Sub(a.0, b.0), v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary(a, b, "mul")?;
        let v = zip_map(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x * y);
        Ok(self.push(Op::Mul(a.0, b.0), v))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.iter().map(|x| x * c).collect();
        self.push(Op::Scale(a.0, c), v)
    }

    /// `1 - a` elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.iter().map(|x| 1.0 - x).collect();
        self.push(Op::OneMinus(a.0), v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.iter().map(|&x| sigmoid(x)).collect();
        self.push(Op::Sigmoid(a.0), v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.iter().map(|x| x.tanh()).collect();
        self.push(Op::Tanh(a.0), v)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.iter().map(|x| x.max(0.0)).collect();
        self.push(Op::Relu(a.0), v)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut v = Vec::with_capacity(parts.iter().map(|p| self.width(*p)).sum());
        for p in parts {
            v.extend_from_slice(&self.nodes[p.0].value);
        }
        self.push(Op::Concat(parts.iter().map(|p| p.0).collect()), v)
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NnError> {
        if start + len > self.width(x) {
            return Err(NnError::Dimension {
                context: "slice".into(),
                expected: self.width(x),
                actual: start + len,
            });
        }
        let v = self.nodes[x.0].value[start..start + len].to_vec();
        Ok(self.push(Op::Slice { x: x.0, start }, v))
    }

    /// Inner product, as a length-1 vector.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary(a, b, "dot")?;
        let s = self.nodes[a.0].value.iter().zip(&self.nodes[b.0].value).map(|(x, y)| x * y).sum();
        Ok(self.push(Op::Dot(a.0, b.0), vec![s]))
    }

    /// Sum of all entries, as a length-1 vector.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        self.push(Op::Sum(a.0), vec![s])
    }

    /// Elementwise sum of equally sized vectors.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let first = parts.first().ok_or_else(|| NnError::Dimension {
            context: "add_n of nothing".into(),
            expected: 1,
            actual: 0,
        })?;
        let w = self.width(*first);
        let mut v = vec![0.0; w];
        for p in parts {
            check_dim("add_n", w, self.width(*p))?;
            for (acc, x) in v.iter_mut().zip(&self.nodes[p.0].value) {
                *acc += x;
            }
        }
        Ok(self.push(Op::AddN(parts.iter().map(|p| p.0).collect()), v))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = super::softmax(&self.nodes[a.0].value);
        self.push(Op::Softmax(a.0), v)
    }

    /// `sum_i weights[i] * items[i]`.
    pub fn mix(&mut self, weights: Var, items: &[Var]) -> Result<Var, NnError> {
        check_dim("mix weights", items.len(), self.width(weights))?;
        let w = items.first().map(|i| self.width(*i)).unwrap_or(0);
        let mut v = vec![0.0; w];
        for (k, item) in items.iter().enumerate() {
            check_dim("mix item", w, self.width(*item))?;
            let c = self.nodes[weights.0].value[k];
            for (acc, x) in v.iter_mut().zip(&self.nodes[item.0].value) {
                *acc += c * x;
            }
        }
        Ok(self.push(
            Op::Mix {
                weights: weights.0,
                items: items.iter().map(|i| i.0).collect(),
            },
            v,
        ))
    }

    /// Fused `-log softmax(logits)[target]`.
    pub fn softmax_ce(&mut self, logits: Var, target: usize) -> Result<Var, NnError> {
        let lv = &self.nodes[logits.0].value;
        if target >= lv.len() {
            return Err(NnError::TargetOutOfRange { target, classes: lv.len() });
        }
        let probs = super::softmax(lv);
        let loss = super::softmax_cross_entropy(lv, target)?;
        Ok(self.push_aux(Op::SoftmaxCe { logits: logits.0, target }, vec![loss], probs))
    }

    /// Summed binary cross entropy of probabilities `p` against `targets`,
    /// with `p` clamped into `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn bce(&mut self, p: Var, targets: &[f64]) -> Result<Var, NnError> {
        check_dim("bce targets", self.width(p), targets.len())?;
        let s = self.nodes[p.0]
            .value
            .iter()
            .zip(targets)
            .map(|(&pi, &y)| super::binary_cross_entropy(pi, y))
            .sum();
        Ok(self.push(
            Op::Bce {
                p: p.0,
                targets: targets.to_vec(),
            },
            vec![s],
        ))
    }

    /// Back-propagates from a scalar node and returns parameter gradients.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); self.nodes.len()];
        grads[output.0] = vec![1.0; self.nodes[output.0].value.len()];
        let mut out = Gradients {
            stores: self.stores.iter().map(|s| vec![Vec::new(); s.len()]).collect(),
        };

        for i in (0..=output.0).rev() {
            if grads[i].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut grads[i]);
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param { store, id } => {
                    let slot = param_slot(&mut out, self.stores[*store], *store, *id);
                    add_into(slot, &g);
                }
                Op::Row { store, id, row } => {
                    let t = self.stores[*store].get(*id);
                    let c = t.cols();
                    let slot = param_slot(&mut out, self.stores[*store], *store, *id);
                    add_into(&mut slot[row * c..(row + 1) * c], &g);
                }
                Op::MatVec { store, id, x } => {
                    let t = self.stores[*store].get(*id);
                    let cols = t.cols();
                    let xv = &self.nodes[*x].value;
                    {
                        let slot = param_slot(&mut out, self.stores[*store], *store, *id);
                        for (r, gr) in g.iter().enumerate() {
                            if *gr == 0.0 {
                                continue;
                            }
                            let row = &mut slot[r * cols..(r + 1) * cols];
                            for (w, xc) in row.iter_mut().zip(xv) {
                                *w += gr * xc;
                            }
                        }
                    }
                    let gx = grad_slot(&mut grads, *x, cols);
                    for (r, gr) in g.iter().enumerate() {
                        if *gr == 0.0 {
                            continue;
                        }
                        let row = &t.values[r * cols..(r + 1) * cols];
                        for (acc, w) in gx.iter_mut().zip(row) {
                            *acc += gr * w;
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(grad_slot(&mut grads, *a, g.len()), &g);
                    add_into(grad_slot(&mut grads, *b, g.len()), &g);
                }
                Op::Sub(a, b) => {
                    add_into(grad_slot(&mut grads, *a, g.len()), &g);
                    let gb = grad_slot(&mut grads, *b, g.len());
                    for (acc, x) in gb.iter_mut().zip(&g) {
                        *acc -= x;
                    }
                }
                Op::Mul(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    let ga = grad_slot(&mut grads, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] += g[k] * bv[k];
                    }
                    let gb = grad_slot(&mut grads, *b, g.len());
                    for k in 0..g.len() {
                        gb[k] += g[k] * av[k];
                    }
                }
                Op::Scale(a, c) => {
                    let ga = grad_slot(&mut grads, *a, g.len());
                    for (acc, x) in ga.iter_mut().zip(&g) {
                        *acc += c * x;
                    }
                }
                Op::OneMinus(a) => {
                    let ga = grad_slot(&mut grads, *a, g.len());
                    for (acc, x) in ga.iter_mut().zip(&g) {
                        *acc -= x;
                    }
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let ga = grad_slot(&mut grads, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let ga = grad_slot(&mut grads, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] += g[k] * (1.0 - y[k] * y[k]);
                    }
                }
                Op::Relu(a) => {
                    let y = &node.value;
                    let ga = grad_slot(&mut grads, *a, g.len());
                    for k in 0..g.len() {
                        if y[k] > 0.0 {
                            ga[k] += g[k];
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.nodes[*p].value.len();
                        add_into(grad_slot(&mut grads, *p, w), &g[off..off + w]);
                        off += w;
                    }
                }
                Op::Slice { x, start } => {
                    let w = self.nodes[*x].value.len();
                    let gx = grad_slot(&mut grads, *x, w);
                    add_into(&mut gx[*start..*start + g.len()], &g);
                }
                Op::Dot(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    let n = av.len();
                    let ga = grad_slot(&mut grads, *a, n);
                    for k in 0..n {
                        ga[k] += g[0] * bv[k];
                    }
                    let gb = grad_slot(&mut grads, *b, n);
                    for k in 0..n {
                        gb[k] += g[0] * av[k];
                    }
                }
                Op::Sum(a) => {
                    let n = self.nodes[*a].value.len();
                    let ga = grad_slot(&mut grads, *a, n);
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
                Op::AddN(parts) => {
                    for p in parts {
                        add_into(grad_slot(&mut grads, *p, g.len()), &g);
                    }
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let dotp: f64 = y.iter().zip(&g).map(|(yk, gk)| yk * gk).sum();
                    let ga = grad_slot(&mut grads, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] += y[k] * (g[k] - dotp);
                    }
                }
                Op::Mix { weights, items } => {
                    let wv = &self.nodes[*weights].value;
                    let mut gw = vec![0.0; items.len()];
                    for (k, item) in items.iter().enumerate() {
                        let iv = &self.nodes[*item].value;
                        gw[k] = iv.iter().zip(&g).map(|(a, b)| a * b).sum();
                        let c = wv[k];
                        let gi = grad_slot(&mut grads, *item, g.len());
                        for (acc, x) in gi.iter_mut().zip(&g) {
                            *acc += c * x;
                        }
                    }
                    add_into(grad_slot(&mut grads, *weights, items.len()), &gw);
                }
                Op::SoftmaxCe { logits, target } => {
                    let probs = &node.aux;
                    let gl = grad_slot(&mut grads, *logits, probs.len());
                    for k in 0..probs.len() {
                        let ind = if k == *target { 1.0 } else { 0.0 };
                        gl[k] += g[0] * (probs[k] - ind);
                    }
                }
                Op::Bce { p, targets } => {
                    let pv = &self.nodes[*p].value;
                    let gp = grad_slot(&mut grads, *p, pv.len());
                    for k in 0..pv.len() {
                        let pk = pv[k];
                        if !(PROB_EPS..=1.0 - PROB_EPS).contains(&pk) {
                            continue;
                        }
                        let y = targets[k];
                        gp[k] += g[0] * (-y / pk + (1.0 - y) / (1.0 - pk));
                    }
                }
            }
        }
        out
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn grad_slot(grads: &mut [Vec<f64>], i: usize, width: usize) -> &mut Vec<f64> {
    if grads[i].is_empty() {
        grads[i] = vec![0.0; width];
    }
    &mut grads[i]
}

fn param_slot<'g>(out: &'g mut Gradients, store: &ModuleParams, s: usize, id: ParamId) -> &'g mut Vec<f64> {
    let slot = &mut out.stores[s][id.0];
    if slot.is_empty() {
        *slot = vec![0.0; store.get(id).len()];
    }
    slot
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_and_add_backprop() {
        let mut p = ModuleParams::new(0);
        let w = p.add_tensor("w", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut t = Tape::new();
        let s = t.bind(&p);
        let x = t.input(vec![1.0, -1.0]);
        let y = t.matvec(s, w, x).unwrap();
        let total = t.sum(y);
        assert_eq!(t.value(y), &[-1.0, -1.0]);
        let g = t.backward(total);
        // d(sum(Wx))/dW_rc = x_c
        assert_eq!(g.store(s)[0], vec![1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut t = Tape::new();
        let x = t.input(vec![3.0, -2.0, 0.5, 10.0]);
        let y = t.softmax(x);
        let s: f64 = t.value(y).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(t.value(y).iter().all(|v| *v > 0.0));
    }

    #[test]
    fn dimension_errors_surface() {
        let mut t = Tape::new();
        let a = t.input(vec![1.0, 2.0]);
        let b = t.input(vec![1.0]);
        assert!(matches!(t.add(a, b), Err(NnError::Dimension { .. })));
        assert!(matches!(t.softmax_ce(a, 5), Err(NnError::TargetOutOfRange { .. })));
    }
}
