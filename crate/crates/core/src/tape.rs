//! Minimal reverse-mode automatic differentiation over f64 vectors.
//!
//! The forecaster's losses are compositions of matrix-vector products,
//! elementwise maps, and reductions, so the tape supports exactly those.
//! Matrices appear only as parameter leaves; every intermediate value is a
//! vector (scalars are length-1 vectors). `backward` accumulates gradients
//! for every leaf registered with `vec_param` / `mat_param`.

use ndarray::{Array1, Array2};
use std::rc::Rc;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Value {
    Vec(Array1<f64>),
    Mat(Array2<f64>),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatVec(Var, Var),
    ConstMatVec(Rc<Array2<f64>>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, Var),
    ScaleConst(Var, f64),
    AddConst(Var, #[allow(dead_code)] f64),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Dot(Var, Var),
    Sum(Var),
    Softmax(Var),
    Concat(Vec<Var>),
    Stack(Vec<Var>),
    Index(Var, usize),
    /// `w_x[:,0] * x + U h + b` — one recurrent-gate preactivation.
    GateAffine {
        w_x: Var,
        x: f64,
        u: Var,
        h: Var,
        b: Var,
    },
    /// `v . tanh(W h + b)` — one additive attention score.
    AttnScore {
        w: Var,
        b: Var,
        v: Var,
        h: Var,
    },
    /// `sum_i alpha[i] * items[i]`.
    WeightedSum(Var, Vec<Var>),
}

/// Records operations and values; one tape per forward pass (or batch).
#[derive(Default)]
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Value>,
}

/// Numerically stable sigmoid.
pub fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softplus `ln(1 + e^x)`.
pub fn softplus_f(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op, value: Value) -> Var {
        self.ops.push(op);
        self.values.push(value);
        Var(self.ops.len() - 1)
    }

    fn vec(&self, v: Var) -> &Array1<f64> {
        match &self.values[v.0] {
            Value::Vec(a) => a,
            Value::Mat(_) => panic!("expected vector value"),
        }
    }

    fn mat(&self, v: Var) -> &Array2<f64> {
        match &self.values[v.0] {
            Value::Mat(a) => a,
            Value::Vec(_) => panic!("expected matrix value"),
        }
    }

    /// Vector parameter leaf (receives a gradient).
    pub fn vec_param(&mut self, value: &Array1<f64>) -> Var {
        self.push(Op::Leaf, Value::Vec(value.clone()))
    }

    /// Matrix parameter leaf (receives a gradient).
    pub fn mat_param(&mut self, value: &Array2<f64>) -> Var {
        self.push(Op::Leaf, Value::Mat(value.clone()))
    }

    /// Constant vector input (gradient computed but normally ignored).
    pub fn constant(&mut self, value: Array1<f64>) -> Var {
        self.push(Op::Leaf, Value::Vec(value))
    }

    /// Length-1 constant.
    pub fn scalar_const(&mut self, value: f64) -> Var {
        self.constant(Array1::from_elem(1, value))
    }

    /// Current value of a vector var.
    pub fn value(&self, v: Var) -> &Array1<f64> {
        self.vec(v)
    }

    /// Value of a length-1 var.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.vec(v);
        debug_assert_eq!(a.len(), 1);
        a[0]
    }

    pub fn matvec(&mut self, m: Var, x: Var) -> Var {
        let value = self.mat(m).dot(self.vec(x));
        self.push(Op::MatVec(m, x), Value::Vec(value))
    }

    /// Product with an untracked constant matrix.
    pub fn const_matvec(&mut self, m: Rc<Array2<f64>>, x: Var) -> Var {
        let value = m.dot(self.vec(x));
        self.push(Op::ConstMatVec(m, x), Value::Vec(value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.vec(a) + self.vec(b);
        self.push(Op::Add(a, b), Value::Vec(value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.vec(a) - self.vec(b);
        self.push(Op::Sub(a, b), Value::Vec(value))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.vec(a) * self.vec(b);
        self.push(Op::Mul(a, b), Value::Vec(value))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.vec(a) / self.vec(b);
        self.push(Op::Div(a, b), Value::Vec(value))
    }

    /// Vector times a length-1 var.
    pub fn scale(&mut self, x: Var, s: Var) -> Var {
        let value = self.vec(x) * self.scalar(s);
        self.push(Op::Scale(x, s), Value::Vec(value))
    }

    pub fn scale_const(&mut self, x: Var, c: f64) -> Var {
        let value = self.vec(x) * c;
        self.push(Op::ScaleConst(x, c), Value::Vec(value))
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let value = self.vec(x) + c;
        self.push(Op::AddConst(x, c), Value::Vec(value))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.vec(x).mapv(sigmoid_f);
        self.push(Op::Sigmoid(x), Value::Vec(value))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.vec(x).mapv(f64::tanh);
        self.push(Op::Tanh(x), Value::Vec(value))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.vec(x).mapv(softplus_f);
        self.push(Op::Softplus(x), Value::Vec(value))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.vec(x).mapv(f64::exp);
        self.push(Op::Exp(x), Value::Vec(value))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let value = self.vec(x).mapv(f64::ln);
        self.push(Op::Ln(x), Value::Vec(value))
    }

    /// Inner product as a length-1 var.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let value = self.vec(a).dot(self.vec(b));
        self.push(Op::Dot(a, b), Value::Vec(Array1::from_elem(1, value)))
    }

    /// Sum of components as a length-1 var.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = self.vec(x).sum();
        self.push(Op::Sum(x), Value::Vec(Array1::from_elem(1, value)))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let a = self.vec(x);
        let max = a.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let exps = a.mapv(|v| (v - max).exp());
        let total = exps.sum();
        self.push(Op::Softmax(x), Value::Vec(exps / total))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut value = Vec::new();
        for &p in parts {
            value.extend(self.vec(p).iter().copied());
        }
        self.push(Op::Concat(parts.to_vec()), Value::Vec(Array1::from_vec(value)))
    }

    /// Stacks length-1 vars into one vector.
    pub fn stack(&mut self, parts: &[Var]) -> Var {
        let value: Array1<f64> = parts.iter().map(|&p| self.scalar(p)).collect();
        self.push(Op::Stack(parts.to_vec()), Value::Vec(value))
    }

    /// Component `i` as a length-1 var.
    pub fn index(&mut self, x: Var, i: usize) -> Var {
        let value = self.vec(x)[i];
        self.push(Op::Index(x, i), Value::Vec(Array1::from_elem(1, value)))
    }

    /// Recurrent-gate preactivation `w_x[:,0] * x + U h + b` for a scalar
    /// input `x` (fused to keep step counts down).
    pub fn gate_affine(&mut self, w_x: Var, x: f64, u: Var, h: Var, b: Var) -> Var {
        let mut value = self.mat(u).dot(self.vec(h));
        value.scaled_add(x, &self.mat(w_x).column(0));
        value += self.vec(b);
        self.push(Op::GateAffine { w_x, x, u, h, b }, Value::Vec(value))
    }

    /// Additive attention score `v . tanh(W h + b)` as a length-1 var.
    pub fn attn_score(&mut self, w: Var, b: Var, v: Var, h: Var) -> Var {
        let mut pre = self.mat(w).dot(self.vec(h));
        pre += self.vec(b);
        let value = self.vec(v).dot(&pre.mapv(f64::tanh));
        self.push(
            Op::AttnScore { w, b, v, h },
            Value::Vec(Array1::from_elem(1, value)),
        )
    }

    /// Convex-style combination `sum_i alpha[i] items[i]`.
    pub fn weighted_sum(&mut self, alpha: Var, items: &[Var]) -> Var {
        let weights = self.vec(alpha);
        assert_eq!(weights.len(), items.len());
        let mut value = Array1::zeros(self.vec(items[0]).len());
        for (i, &item) in items.iter().enumerate() {
            value.scaled_add(weights[i], self.vec(item));
        }
        self.push(
            Op::WeightedSum(alpha, items.to_vec()),
            Value::Vec(value),
        )
    }

    /// Reverse pass from a length-1 loss var.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Value>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Value::Vec(Array1::from_elem(1, 1.0)));
        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(Value::Vec(g)) => g,
                Some(m @ Value::Mat(_)) => {
                    grads[idx] = Some(m);
                    continue;
                }
                None => continue,
            };
            self.accumulate(idx, &g, &mut grads);
            grads[idx] = Some(Value::Vec(g));
        }
        Gradients { grads }
    }

    fn accumulate(&self, idx: usize, g: &Array1<f64>, grads: &mut [Option<Value>]) {
        let add_vec = |grads: &mut [Option<Value>], v: Var, inc: Array1<f64>| {
            match &mut grads[v.0] {
                Some(Value::Vec(acc)) => *acc += &inc,
                Some(Value::Mat(_)) => panic!("gradient shape mismatch"),
                slot @ None => *slot = Some(Value::Vec(inc)),
            }
        };
        let add_mat = |grads: &mut [Option<Value>], v: Var, inc: Array2<f64>| {
            match &mut grads[v.0] {
                Some(Value::Mat(acc)) => *acc += &inc,
                Some(Value::Vec(_)) => panic!("gradient shape mismatch"),
                slot @ None => *slot = Some(Value::Mat(inc)),
            }
        };
        match &self.ops[idx] {
            Op::Leaf => {}
            Op::MatVec(m, x) => {
                let xv = self.vec(*x);
                let mv = self.mat(*m);
                let outer = g
                    .view()
                    .insert_axis(ndarray::Axis(1))
                    .dot(&xv.view().insert_axis(ndarray::Axis(0)));
                add_mat(grads, *m, outer);
                add_vec(grads, *x, mv.t().dot(g));
            }
            Op::ConstMatVec(m, x) => {
                add_vec(grads, *x, m.t().dot(g));
            }
            Op::Add(a, b) => {
                add_vec(grads, *a, g.clone());
                add_vec(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                add_vec(grads, *a, g.clone());
                add_vec(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                add_vec(grads, *a, g * self.vec(*b));
                add_vec(grads, *b, g * self.vec(*a));
            }
            Op::Div(a, b) => {
                let bv = self.vec(*b);
                add_vec(grads, *a, g / bv);
                add_vec(grads, *b, -(g * self.vec(*a)) / (bv * bv));
            }
            Op::Scale(x, s) => {
                let sv = self.scalar(*s);
                add_vec(grads, *x, g * sv);
                let ds = g.dot(self.vec(*x));
                add_vec(grads, *s, Array1::from_elem(1, ds));
            }
            Op::ScaleConst(x, c) => add_vec(grads, *x, g * *c),
            Op::AddConst(x, _) => add_vec(grads, *x, g.clone()),
            Op::Sigmoid(x) => {
                let y = self.vec(Var(idx));
                add_vec(grads, *x, g * &(y * &(1.0 - y)));
            }
            Op::Tanh(x) => {
                let y = self.vec(Var(idx));
                add_vec(grads, *x, g * &(1.0 - y * y));
            }
            Op::Softplus(x) => {
                let d = self.vec(*x).mapv(sigmoid_f);
                add_vec(grads, *x, g * &d);
            }
            Op::Exp(x) => {
                let y = self.vec(Var(idx));
                add_vec(grads, *x, g * y);
            }
            Op::Ln(x) => {
                add_vec(grads, *x, g / self.vec(*x));
            }
            Op::Dot(a, b) => {
                let g0 = g[0];
                add_vec(grads, *a, self.vec(*b) * g0);
                add_vec(grads, *b, self.vec(*a) * g0);
            }
            Op::Sum(x) => {
                add_vec(grads, *x, Array1::from_elem(self.vec(*x).len(), g[0]));
            }
            Op::Softmax(x) => {
                let y = self.vec(Var(idx));
                let inner = g.dot(y);
                add_vec(grads, *x, y * &(g - inner));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.vec(p).len();
                    add_vec(
                        grads,
                        p,
                        g.slice(ndarray::s![offset..offset + len]).to_owned(),
                    );
                    offset += len;
                }
            }
            Op::Stack(parts) => {
                for (i, &p) in parts.iter().enumerate() {
                    add_vec(grads, p, Array1::from_elem(1, g[i]));
                }
            }
            Op::Index(x, i) => {
                let mut inc = Array1::zeros(self.vec(*x).len());
                inc[*i] = g[0];
                add_vec(grads, *x, inc);
            }
            Op::GateAffine { w_x, x, u, h, b } => {
                let g_col = g.view().insert_axis(ndarray::Axis(1));
                add_mat(grads, *w_x, g_col.to_owned() * *x);
                let hv = self.vec(*h);
                let outer = g_col.dot(&hv.view().insert_axis(ndarray::Axis(0)));
                add_mat(grads, *u, outer);
                add_vec(grads, *h, self.mat(*u).t().dot(g));
                add_vec(grads, *b, g.clone());
            }
            Op::AttnScore { w, b, v, h } => {
                let hv = self.vec(*h);
                let mut pre = self.mat(*w).dot(hv);
                pre += self.vec(*b);
                let t = pre.mapv(f64::tanh);
                let g0 = g[0];
                add_vec(grads, *v, &t * g0);
                let dpre = (1.0 - &t * &t) * &(self.vec(*v) * g0);
                let outer = dpre
                    .view()
                    .insert_axis(ndarray::Axis(1))
                    .dot(&hv.view().insert_axis(ndarray::Axis(0)));
                add_mat(grads, *w, outer);
                add_vec(grads, *h, self.mat(*w).t().dot(&dpre));
                add_vec(grads, *b, dpre);
            }
            Op::WeightedSum(alpha, items) => {
                let weights = self.vec(*alpha);
                let mut d_alpha = Array1::zeros(weights.len());
                for (i, &item) in items.iter().enumerate() {
                    d_alpha[i] = g.dot(self.vec(item));
                    add_vec(grads, item, g * weights[i]);
                }
                add_vec(grads, *alpha, d_alpha);
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Value>>,
}

impl Gradients {
    /// Gradient of a vector leaf (zeros if the loss never touched it).
    pub fn vec_grad(&self, tape: &Tape, v: Var) -> Array1<f64> {
        match &self.grads[v.0] {
            Some(Value::Vec(g)) => g.clone(),
            Some(Value::Mat(_)) => panic!("gradient shape mismatch"),
            None => Array1::zeros(tape.vec(v).len()),
        }
    }

    /// Gradient of a matrix leaf (zeros if the loss never touched it).
    pub fn mat_grad(&self, tape: &Tape, v: Var) -> Array2<f64> {
        match &self.grads[v.0] {
            Some(Value::Mat(g)) => g.clone(),
            Some(Value::Vec(_)) => panic!("gradient shape mismatch"),
            None => Array2::zeros(tape.mat(v).dim()),
        }
    }
}
