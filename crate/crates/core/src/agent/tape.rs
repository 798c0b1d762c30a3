//! Minimal reverse-mode automatic differentiation over dense vectors.
//!
//! Every node holds a flat `f64` vector. Matrices are row-major vectors
//! consumed by [`Tape::matvec`]. Parameter tensors are borrowed, never copied.

use std::borrow::Cow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatVec { w: Var, x: Var, cols: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Dot(Var, Var),
    Concat(Vec<Var>),
    Mean(Vec<Var>),
    Sum(Vec<Var>),
    Row { table: Var, row: usize, cols: usize },
    Scale(Var, f64),
    NegLogSoftmax { logits: Var, target: usize },
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, [f64]>,
    op: Op,
    grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of one scalar with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, value: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let grad = inputs.iter().any(|i| self.nodes[i.0].grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Owned input. Gradients are only tracked through leaves that ask for it.
    pub fn leaf(&mut self, value: Vec<f64>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Borrowed input, typically a parameter tensor.
    pub fn borrowed(&mut self, value: &'a [f64], requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// `W x` for a row-major `W` with `cols` columns.
    pub fn matvec(&mut self, w: Var, x: Var) -> Var {
        let cols = self.value(x).len();
        let wv = self.value(w);
        assert!(cols > 0 && wv.len().is_multiple_of(cols), "matvec shape mismatch");
        let xv = self.value(x);
        let out = wv.chunks_exact(cols).map(|row| dot(row, xv)).collect();
        self.push(out, Op::MatVec { w, x, cols }, &[w, x])
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "elementwise shape mismatch");
        let out = av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect();
        self.push(out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push(out, Op::Tanh(a), &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * s).collect();
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// Scalar (length-1) inner product.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "dot shape mismatch");
        let out = vec![dot(av, bv)];
        self.push(out, Op::Dot(a, b), &[a, b])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let out = parts.iter().flat_map(|p| self.value(*p).iter().copied()).collect();
        self.push(out, Op::Concat(parts.to_vec()), parts)
    }

    pub fn mean(&mut self, parts: &[Var]) -> Var {
        let mut out = self.sum_values(parts);
        let n = parts.len() as f64;
        out.iter_mut().for_each(|v| *v /= n);
        self.push(out, Op::Mean(parts.to_vec()), parts)
    }

    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let out = self.sum_values(parts);
        self.push(out, Op::Sum(parts.to_vec()), parts)
    }

    fn sum_values(&self, parts: &[Var]) -> Vec<f64> {
        assert!(!parts.is_empty(), "reduction over no inputs");
        let mut out = vec![0.0; self.value(parts[0]).len()];
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.len(), out.len(), "reduction shape mismatch");
            out.iter_mut().zip(v).for_each(|(o, x)| *o += x);
        }
        out
    }

    /// Row `row` of a row-major table with `cols` columns.
    pub fn row(&mut self, table: Var, row: usize, cols: usize) -> Var {
        let out = self.value(table)[row * cols..(row + 1) * cols].to_vec();
        self.push(out, Op::Row { table, row, cols }, &[table])
    }

    /// `-log softmax(logits)[target]` as a scalar.
    pub fn neg_log_softmax(&mut self, logits: Var, target: usize) -> Var {
        let l = self.value(logits);
        assert!(target < l.len(), "target out of range");
        let out = vec![log_sum_exp(l) - l[target]];
        self.push(out, Op::NegLogSoftmax { logits, target }, &[logits])
    }

    /// Backpropagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "loss must be a scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.grad {
                self.propagate(&node.op, i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.grad {
                *g = None;
            }
        }
        Gradients { grads }
    }

    fn propagate(&self, op: &Op, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.nodes[v.0].grad {
                let len = self.nodes[v.0].value.len();
                f(grads[v.0].get_or_insert_with(|| vec![0.0; len]));
            }
        };
        match op {
            Op::Leaf => {}
            Op::MatVec { w, x, cols } => {
                let (wv, xv) = (self.value(*w), self.value(*x));
                acc(*w, &mut |gw| {
                    for (r, gr) in g.iter().enumerate() {
                        if *gr != 0.0 {
                            let row = &mut gw[r * cols..(r + 1) * cols];
                            row.iter_mut().zip(xv).for_each(|(a, x)| *a += gr * x);
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    for (row, gr) in wv.chunks_exact(*cols).zip(g) {
                        gx.iter_mut().zip(row).for_each(|(a, w)| *a += gr * w);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(g.iter().zip(bv)).for_each(|(x, (gy, b))| *x += gy * b)
                });
                acc(*b, &mut |gb| {
                    gb.iter_mut().zip(g.iter().zip(av)).for_each(|(x, (gy, a))| *x += gy * a)
                });
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                acc(*a, &mut |ga| {
                    ga.iter_mut()
                        .zip(g.iter().zip(y.iter()))
                        .for_each(|(x, (gy, s))| *x += gy * s * (1.0 - s))
                });
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                acc(*a, &mut |ga| {
                    ga.iter_mut()
                        .zip(g.iter().zip(y.iter()))
                        .for_each(|(x, (gy, t))| *x += gy * (1.0 - t * t))
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y)),
            Op::Dot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| ga.iter_mut().zip(bv).for_each(|(x, b)| *x += g[0] * b));
                acc(*b, &mut |gb| gb.iter_mut().zip(av).for_each(|(x, a)| *x += g[0] * a));
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    acc(*p, &mut |gp| add_into(gp, &g[off..off + n]));
                    off += n;
                }
            }
            Op::Mean(parts) => {
                let s = 1.0 / parts.len() as f64;
                for p in parts {
                    acc(*p, &mut |gp| gp.iter_mut().zip(g).for_each(|(x, y)| *x += s * y));
                }
            }
            Op::Sum(parts) => {
                for p in parts {
                    acc(*p, &mut |gp| add_into(gp, g));
                }
            }
            Op::Row { table, row, cols } => {
                acc(*table, &mut |gt| add_into(&mut gt[row * cols..(row + 1) * cols], g));
            }
            Op::NegLogSoftmax { logits, target } => {
                let p = softmax(self.value(*logits));
                acc(*logits, &mut |gl| {
                    for (k, (x, pk)) in gl.iter_mut().zip(&p).enumerate() {
                        let onehot = if k == *target { 1.0 } else { 0.0 };
                        *x += g[0] * (pk - onehot);
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(l: &[f64]) -> f64 {
    let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + l.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(l: &[f64]) -> Vec<f64> {
    let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = l.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Builds a small expression exercising every op and returns its scalar.
    fn expr<'a>(t: &mut Tape<'a>, w: &'a [f64], x: Vec<f64>) -> (Var, Var, Var) {
        let wv = t.borrowed(w, true);
        let xv = t.leaf(x, true);
        let h = t.matvec(wv, xv);
        let s = t.sigmoid(h);
        let th = t.tanh(h);
        let m = t.mul(s, th);
        let d = t.sub(m, s);
        let a = t.add(d, th);
        let c = t.concat(&[a, s]);
        let r = t.row(wv, 1, 3);
        let mean = t.mean(&[r, xv]);
        let sum = t.sum(&[mean, xv]);
        let dd = t.dot(sum, xv);
        let sc = t.scale(dd, 0.7);
        let cc = t.concat(&[c, sc]);
        let loss = t.neg_log_softmax(cc, 2);
        (loss, wv, xv)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let w: Vec<f64> = (0..6).map(|i| 0.3 * i as f64 - 0.8).collect();
        let x = vec![0.4, -0.2, 0.9];
        let mut t = Tape::new();
        let (loss, wv, xv) = expr(&mut t, &w, x.clone());
        let g = t.backward(loss);
        let f = |w: &[f64], x: &[f64]| {
            let mut t = Tape::new();
            let (l, _, _) = expr(&mut t, w, x.to_vec());
            t.scalar(l)
        };
        let h = 1e-6;
        for i in 0..w.len() {
            let (mut p, mut m) = (w.clone(), w.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (f(&p, &x) - f(&m, &x)) / (2.0 * h);
            assert!((g.get(wv).unwrap()[i] - fd).abs() < 1e-7);
        }
        for i in 0..x.len() {
            let (mut p, mut m) = (x.clone(), x.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (f(&w, &p) - f(&w, &m)) / (2.0 * h);
            assert!((g.get(xv).unwrap()[i] - fd).abs() < 1e-7);
        }
    }

    #[test]
    fn constant_leaves_get_no_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1.0, 2.0], false);
        let b = t.leaf(vec![3.0, 4.0], true);
        let d = t.dot(a, b);
        let g = t.backward(d);
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1000.0, 1000.0, -5.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((p[0] - 0.5).abs() < 1e-12);
    }
}
