//! Minimal reverse-mode differentiation over dense vectors and matrices.
//!
//! Every node holds a row-major value of shape `rows x cols`; vectors are
//! `n x 1` and scalars `1 x 1`. The tape is append-only, so node indices are a
//! topological order and the backward pass is a single reverse sweep.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// matrix (r x c) times vector (c)
    MatVec(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `scale * x + shift`
    Affine(Var, f64),
    MulConst(Var, Vec<f64>),
    /// scalar times vector
    ScaleBy(Var, Var),
    Dot(Var, Var),
    Sum(Vec<Var>),
    Slice(Var, usize),
    /// scalars -> vector
    Stack(Vec<Var>),
    /// vector element -> scalar
    Pick(Var, usize),
    Softmax(Var),
    Elu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Square(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the output w.r.t. `v`, or `None` if `v` does not influence it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Vec<f64>, rows: usize, cols: usize, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn len_of(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    pub fn vector(&mut self, value: Vec<f64>) -> Var {
        let n = value.len();
        self.push(value, n, 1, Op::Leaf)
    }

    pub fn matrix(&mut self, value: Vec<f64>, rows: usize, cols: usize) -> Var {
        assert_eq!(value.len(), rows * cols, "matrix data length");
        self.push(value, rows, cols, Op::Leaf)
    }

    pub fn matvec(&mut self, m: Var, x: Var) -> Var {
        let (rows, cols) = (self.nodes[m.0].rows, self.nodes[m.0].cols);
        assert_eq!(cols, self.len_of(x), "matvec inner dimension");
        let mv = &self.nodes[m.0].value;
        let xv = &self.nodes[x.0].value;
        let out = mv
            .chunks_exact(cols)
            .map(|row| row.iter().zip(xv).map(|(a, b)| a * b).sum())
            .collect();
        self.push(out, rows, 1, Op::MatVec(m, x))
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        assert_eq!(self.len_of(a), self.len_of(b), "elementwise length");
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect::<Vec<_>>();
        let n = out.len();
        self.push(out, n, 1, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let n = out.len();
        self.push(out, n, 1, op)
    }

    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        self.map(a, |x| scale * x + shift, Op::Affine(a, scale))
    }

    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Var {
        assert_eq!(self.len_of(a), c.len(), "mul_const length");
        let out: Vec<f64> = self.nodes[a.0].value.iter().zip(&c).map(|(x, y)| x * y).collect();
        let n = out.len();
        self.push(out, n, 1, Op::MulConst(a, c))
    }

    pub fn scale_by(&mut self, s: Var, v: Var) -> Var {
        let k = self.scalar(s);
        self.map(v, |x| k * x, Op::ScaleBy(s, v))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.len_of(a), self.len_of(b), "dot length");
        let d = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .sum();
        self.push(vec![d], 1, 1, Op::Dot(a, b))
    }

    pub fn sum(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "sum of nothing");
        let n = self.len_of(xs[0]);
        let mut out = vec![0.0; n];
        for &x in xs {
            assert_eq!(self.len_of(x), n, "sum length");
            for (o, v) in out.iter_mut().zip(&self.nodes[x.0].value) {
                *o += v;
            }
        }
        self.push(out, n, 1, Op::Sum(xs.to_vec()))
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.nodes[a.0].value[start..start + len].to_vec();
        self.push(out, len, 1, Op::Slice(a, start))
    }

    pub fn stack(&mut self, scalars: &[Var]) -> Var {
        let out: Vec<f64> = scalars.iter().map(|&s| self.scalar(s)).collect();
        let n = out.len();
        self.push(out, n, 1, Op::Stack(scalars.to_vec()))
    }

    pub fn pick(&mut self, a: Var, i: usize) -> Var {
        let x = self.nodes[a.0].value[i];
        self.push(vec![x], 1, 1, Op::Pick(a, i))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let out: Vec<f64> = e.into_iter().map(|x| x / z).collect();
        let n = out.len();
        self.push(out, n, 1, Op::Softmax(a))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.map(a, |x| if x > 0.0 { x } else { x.exp_m1() }, Op::Elu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.map(a, |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.len_of(output), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatVec(m, x) => {
                    let (rows, cols) = (self.nodes[m.0].rows, self.nodes[m.0].cols);
                    let mv = &self.nodes[m.0].value;
                    let xv = &self.nodes[x.0].value;
                    let gm = acc(&mut grads, *m, rows * cols);
                    for (r, &gr) in g.iter().enumerate() {
                        if gr != 0.0 {
                            for (o, &xc) in gm[r * cols..(r + 1) * cols].iter_mut().zip(xv) {
                                *o += gr * xc;
                            }
                        }
                    }
                    let gx = acc(&mut grads, *x, cols);
                    for (r, &gr) in g.iter().enumerate() {
                        if gr != 0.0 {
                            for (o, &w) in gx.iter_mut().zip(&mv[r * cols..(r + 1) * cols]) {
                                *o += gr * w;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut grads, *a, g.len()), &g, 1.0);
                    add_into(acc(&mut grads, *b, g.len()), &g, 1.0);
                }
                Op::Sub(a, b) => {
                    add_into(acc(&mut grads, *a, g.len()), &g, 1.0);
                    add_into(acc(&mut grads, *b, g.len()), &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let ga = acc(&mut grads, *a, g.len());
                    for ((o, gi), bi) in ga.iter_mut().zip(&g).zip(bv) {
                        *o += gi * bi;
                    }
                    let gb = acc(&mut grads, *b, g.len());
                    for ((o, gi), ai) in gb.iter_mut().zip(&g).zip(av) {
                        *o += gi * ai;
                    }
                }
                Op::Affine(a, scale) => add_into(acc(&mut grads, *a, g.len()), &g, *scale),
                Op::MulConst(a, c) => {
                    let ga = acc(&mut grads, *a, g.len());
                    for ((o, gi), ci) in ga.iter_mut().zip(&g).zip(c) {
                        *o += gi * ci;
                    }
                }
                Op::ScaleBy(s, v) => {
                    let k = self.scalar(*s);
                    let vv = &self.nodes[v.0].value;
                    let ds: f64 = g.iter().zip(vv).map(|(a, b)| a * b).sum();
                    acc(&mut grads, *s, 1)[0] += ds;
                    add_into(acc(&mut grads, *v, g.len()), &g, k);
                }
                Op::Dot(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    add_into(acc(&mut grads, *a, av.len()), bv, g[0]);
                    add_into(acc(&mut grads, *b, bv.len()), av, g[0]);
                }
                Op::Sum(xs) => {
                    for x in xs {
                        add_into(acc(&mut grads, *x, g.len()), &g, 1.0);
                    }
                }
                Op::Slice(a, start) => {
                    let n = self.len_of(*a);
                    add_into(&mut acc(&mut grads, *a, n)[*start..*start + g.len()], &g, 1.0);
                }
                Op::Stack(xs) => {
                    for (x, gi) in xs.iter().zip(&g) {
                        acc(&mut grads, *x, 1)[0] += gi;
                    }
                }
                Op::Pick(a, i) => {
                    let n = self.len_of(*a);
                    acc(&mut grads, *a, n)[*i] += g[0];
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let gy: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                    let ga = acc(&mut grads, *a, y.len());
                    for ((o, gi), yi) in ga.iter_mut().zip(&g).zip(y) {
                        *o += yi * (gi - gy);
                    }
                }
                Op::Elu(a) => {
                    let x = &self.nodes[a.0].value;
                    let y = &node.value;
                    let ga = acc(&mut grads, *a, g.len());
                    for (((o, gi), xi), yi) in ga.iter_mut().zip(&g).zip(x).zip(y) {
                        *o += gi * if *xi > 0.0 { 1.0 } else { yi + 1.0 };
                    }
                }
                Op::LeakyRelu(a, slope) => {
                    let x = &self.nodes[a.0].value;
                    let ga = acc(&mut grads, *a, g.len());
                    for ((o, gi), xi) in ga.iter_mut().zip(&g).zip(x) {
                        *o += gi * if *xi > 0.0 { 1.0 } else { *slope };
                    }
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let ga = acc(&mut grads, *a, g.len());
                    for ((o, gi), yi) in ga.iter_mut().zip(&g).zip(y) {
                        *o += gi * yi * (1.0 - yi);
                    }
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let ga = acc(&mut grads, *a, g.len());
                    for ((o, gi), yi) in ga.iter_mut().zip(&g).zip(y) {
                        *o += gi * (1.0 - yi * yi);
                    }
                }
                Op::Square(a) => {
                    let x = &self.nodes[a.0].value;
                    let ga = acc(&mut grads, *a, g.len());
                    for ((o, gi), xi) in ga.iter_mut().zip(&g).zip(x) {
                        *o += 2.0 * gi * xi;
                    }
                }
            }
            // keep gradients of leaves around for the caller
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Gradients { grads }
    }
}

fn add_into(dst: &mut [f64], src: &[f64], k: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}
