//! Minimal reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter
//! the tape through [`Tape::param`] and carry their store index so that
//! [`Tape::backward`] can hand back one gradient per parameter. Values
//! entered through [`Tape::constant`] are leaves with no parameter binding;
//! gradients still flow *through* them to nothing, which is how detached
//! (stop-update) copies of parameters are expressed.

use std::sync::Arc;

use crate::hier;
use crate::notedata::ChordPartition;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a` is R x C, `b` is 1 x C.
    AddRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    /// softplus(x) + floor
    Softplus(Var),
    Square(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Row(Var, usize),
    StackRows(Vec<Var>),
    SegmentMean(Var, Arc<ChordPartition>),
    SegmentBroadcast(Var, Arc<ChordPartition>),
    /// Row lookup into an embedding table.
    Gather(Var, Arc<Vec<usize>>),
    Sum(Var),
    Mean(Var),
    Gru(GruCache),
    KlDiag(KlInputs),
}

#[derive(Debug)]
struct GruCache {
    xproj: Var,
    h: Var,
    w_hh: Var,
    b_hh: Var,
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    /// hidden projection of the candidate gate, before the reset product
    hn: Vec<f64>,
}

#[derive(Debug)]
struct KlInputs {
    mu_q: Var,
    sigma_q: Var,
    mu_p: Option<Var>,
    sigma_p: Option<Var>,
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Computation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of every tape node, produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Lower bound added to every softplus output.
pub const SOFTPLUS_FLOOR: f64 = 1e-4;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: usize, value: Matrix) -> Var {
        self.push(value, Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1);
        assert_eq!(b.cols(), self.value(a).cols(), "bias width mismatch");
        let mut v = self.value(a).clone();
        let b = b.row(0).to_vec();
        for r in 0..v.rows() {
            for (x, y) in v.row_mut(r).iter_mut().zip(&b) {
                *x += y;
            }
        }
        self.push(v, Op::AddRow(a, bias))
    }

    /// `x * w + b` for a row-batch `x`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    /// Positive map used for standard deviations.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| softplus(x) + SOFTPLUS_FLOOR);
        self.push(v, Op::Softplus(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::concat_cols(&mats);
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice_cols(start, end);
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn row(&mut self, a: Var, r: usize) -> Var {
        let v = Matrix::row_vector(self.value(a).row(r));
        self.push(v, Op::Row(a, r))
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::stack_rows(&mats);
        self.push(v, Op::StackRows(parts.to_vec()))
    }

    /// Chordwise mean pooling (N2C).
    pub fn segment_mean(&mut self, a: Var, part: &Arc<ChordPartition>) -> Var {
        let v = hier::n2c(self.value(a), part).expect("segment_mean shape");
        self.push(v, Op::SegmentMean(a, Arc::clone(part)))
    }

    /// Chord to note broadcast (C2N).
    pub fn segment_broadcast(&mut self, a: Var, part: &Arc<ChordPartition>) -> Var {
        let v = hier::c2n(self.value(a), part).expect("segment_broadcast shape");
        self.push(v, Op::SegmentBroadcast(a, Arc::clone(part)))
    }

    pub fn gather(&mut self, table: Var, idx: Arc<Vec<usize>>) -> Var {
        let t = self.value(table);
        let mut v = Matrix::zeros(idx.len(), t.cols());
        for (r, &i) in idx.iter().enumerate() {
            v.row_mut(r).copy_from_slice(t.row(i));
        }
        self.push(v, Op::Gather(table, idx))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).mean());
        self.push(v, Op::Mean(a))
    }

    /// Mean squared error between equally shaped values.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let s = self.square(d);
        self.mean(s)
    }

    /// One gated recurrent unit step.
    ///
    /// `xproj` is the 1 x 3H input projection (input bias included) ordered
    /// as (reset, update, candidate); `h` is the 1 x H previous state.
    pub fn gru_step(&mut self, xproj: Var, h: Var, w_hh: Var, b_hh: Var) -> Var {
        let hv = self.value(h);
        let hid = hv.cols();
        let hp = hv.matmul(self.value(w_hh));
        let bh = self.value(b_hh).row(0);
        let xp = self.value(xproj).row(0);
        debug_assert_eq!(xp.len(), 3 * hid);
        let mut r = vec![0.0; hid];
        let mut z = vec![0.0; hid];
        let mut n = vec![0.0; hid];
        let mut hn = vec![0.0; hid];
        let mut out = Matrix::zeros(1, hid);
        let hprev = hv.row(0);
        let hpr = hp.row(0);
        for j in 0..hid {
            r[j] = sigmoid(xp[j] + hpr[j] + bh[j]);
            z[j] = sigmoid(xp[hid + j] + hpr[hid + j] + bh[hid + j]);
            hn[j] = hpr[2 * hid + j] + bh[2 * hid + j];
            n[j] = (xp[2 * hid + j] + r[j] * hn[j]).tanh();
            out.row_mut(0)[j] = (1.0 - z[j]) * n[j] + z[j] * hprev[j];
        }
        self.push(out, Op::Gru(GruCache { xproj, h, w_hh, b_hh, r, z, n, hn }))
    }

    /// Sum over rows and columns of the closed-form KL divergence between
    /// diagonal Gaussians `N(mu_q, sigma_q^2)` and `N(mu_p, sigma_p^2)`;
    /// a missing prior means the standard normal.
    pub fn kl_diag(&mut self, mu_q: Var, sigma_q: Var, prior: Option<(Var, Var)>) -> Var {
        let mq = self.value(mu_q);
        let sq = self.value(sigma_q);
        let total = match prior {
            Some((mp, sp)) => kl_value(mq, sq, Some((self.value(mp), self.value(sp)))),
            None => kl_value(mq, sq, None),
        };
        self.push(
            Matrix::scalar(total),
            Op::KlDiag(KlInputs { mu_q, sigma_q, mu_p: prior.map(|p| p.0), sigma_p: prior.map(|p| p.1) }),
        )
    }

    /// Reverse sweep seeded with upstream gradients for one or more nodes.
    pub fn backward(&self, seeds: &[(Var, Matrix)]) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.value(*v).shape(), "seed shape mismatch");
            accumulate(&mut grads, self, *v, g);
        }
        let top = seeds.iter().map(|(v, _)| v.0).max().unwrap_or(0);
        for i in (0..=top).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    /// Sum gradients of parameter nodes into per-parameter slots.
    pub fn param_grads(&self, grads: &Gradients, out: &mut [Matrix]) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = &grads.grads[i] {
                    out[id].add_assign(g);
                }
            }
        }
    }

    fn backprop_node(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let ga = g.matmul_t(self.value(*b));
                let gb = self.value(*a).t_matmul(g);
                accumulate(grads, self, *a, &ga);
                accumulate(grads, self, *b, &gb);
            }
            Op::Add(a, b) => {
                accumulate(grads, self, *a, g);
                accumulate(grads, self, *b, g);
            }
            Op::Sub(a, b) => {
                accumulate(grads, self, *a, g);
                accumulate(grads, self, *b, &g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(self.value(*b), |x, y| x * y);
                let gb = g.zip_map(self.value(*a), |x, y| x * y);
                accumulate(grads, self, *a, &ga);
                accumulate(grads, self, *b, &gb);
            }
            Op::AddRow(a, b) => {
                accumulate(grads, self, *a, g);
                let mut gb = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (x, y) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                        *x += y;
                    }
                }
                accumulate(grads, self, *b, &gb);
            }
            Op::Scale(a, s) => accumulate(grads, self, *a, &g.map(|x| x * s)),
            Op::Sigmoid(a) => {
                let ga = g.zip_map(&node.value, |x, y| x * y * (1.0 - y));
                accumulate(grads, self, *a, &ga);
            }
            Op::Tanh(a) => {
                let ga = g.zip_map(&node.value, |x, y| x * (1.0 - y * y));
                accumulate(grads, self, *a, &ga);
            }
            Op::Softplus(a) => {
                let ga = g.zip_map(self.value(*a), |x, y| x * sigmoid(y));
                accumulate(grads, self, *a, &ga);
            }
            Op::Square(a) => {
                let ga = g.zip_map(self.value(*a), |x, y| 2.0 * x * y);
                accumulate(grads, self, *a, &ga);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    accumulate(grads, self, *p, &g.slice_cols(off, off + w));
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let slot = slot(grads, *a, src.shape());
                for r in 0..g.rows() {
                    for (c, &x) in g.row(r).iter().enumerate() {
                        let idx = r * src.cols() + start + c;
                        slot.data_mut()[idx] += x;
                    }
                }
            }
            Op::Row(a, r) => {
                let src = self.value(*a);
                let slot = slot(grads, *a, src.shape());
                for (x, y) in slot.row_mut(*r).iter_mut().zip(g.row(0)) {
                    *x += y;
                }
            }
            Op::StackRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    let cols = g.cols();
                    let sub = Matrix::from_vec(rows, cols, g.data()[off * cols..(off + rows) * cols].to_vec());
                    accumulate(grads, self, *p, &sub);
                    off += rows;
                }
            }
            Op::SegmentMean(a, part) => {
                // adjoint of the mean: broadcast scaled by 1/|chord|
                let mut ga = hier::c2n(g, part).expect("shape");
                for (n, &c) in part.note_chords().iter().enumerate() {
                    let s = 1.0 / part.groups()[c].len() as f64;
                    for x in ga.row_mut(n) {
                        *x *= s;
                    }
                }
                accumulate(grads, self, *a, &ga);
            }
            Op::SegmentBroadcast(a, part) => {
                // adjoint of the broadcast: segment sum
                let src = self.value(*a);
                let slot = slot(grads, *a, src.shape());
                for (n, &c) in part.note_chords().iter().enumerate() {
                    for (x, y) in slot.row_mut(c).iter_mut().zip(g.row(n)) {
                        *x += y;
                    }
                }
            }
            Op::Gather(table, idx) => {
                let src = self.value(*table);
                let slot = slot(grads, *table, src.shape());
                for (r, &i) in idx.iter().enumerate() {
                    for (x, y) in slot.row_mut(i).iter_mut().zip(g.row(r)) {
                        *x += y;
                    }
                }
            }
            Op::Sum(a) => {
                let s = g.item();
                let (r, c) = self.value(*a).shape();
                accumulate(grads, self, *a, &Matrix::filled(r, c, s));
            }
            Op::Mean(a) => {
                let (r, c) = self.value(*a).shape();
                let s = g.item() / (r * c).max(1) as f64;
                accumulate(grads, self, *a, &Matrix::filled(r, c, s));
            }
            Op::Gru(cache) => self.backprop_gru(cache, g, grads),
            Op::KlDiag(k) => {
                let s = g.item();
                let mq = self.value(k.mu_q);
                let sq = self.value(k.sigma_q);
                let (rows, cols) = mq.shape();
                let mut gmq = Matrix::zeros(rows, cols);
                let mut gsq = Matrix::zeros(rows, cols);
                let mut gmp = Matrix::zeros(rows, cols);
                let mut gsp = Matrix::zeros(rows, cols);
                for idx in 0..rows * cols {
                    let (m1, s1) = (mq.data()[idx], sq.data()[idx]);
                    let (m2, s2) = match (k.mu_p, k.sigma_p) {
                        (Some(mp), Some(sp)) => (self.value(mp).data()[idx], self.value(sp).data()[idx]),
                        _ => (0.0, 1.0),
                    };
                    let v2 = s2 * s2;
                    gmq.data_mut()[idx] = s * (m1 - m2) / v2;
                    gsq.data_mut()[idx] = s * (-1.0 / s1 + s1 / v2);
                    gmp.data_mut()[idx] = -s * (m1 - m2) / v2;
                    gsp.data_mut()[idx] = s * (1.0 / s2 - (s1 * s1 + (m1 - m2).powi(2)) / (v2 * s2));
                }
                accumulate(grads, self, k.mu_q, &gmq);
                accumulate(grads, self, k.sigma_q, &gsq);
                if let (Some(mp), Some(sp)) = (k.mu_p, k.sigma_p) {
                    accumulate(grads, self, mp, &gmp);
                    accumulate(grads, self, sp, &gsp);
                }
            }
        }
    }

    fn backprop_gru(&self, c: &GruCache, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let hid = c.r.len();
        let hprev = self.value(c.h).row(0).to_vec();
        let go = g.row(0);
        // gradients w.r.t. pre-activations of (r, z, n) on the input side
        // and of the hidden projection (r, z, hn)
        let mut gx = Matrix::zeros(1, 3 * hid);
        let mut gh_proj = Matrix::zeros(1, 3 * hid);
        let mut gh = Matrix::zeros(1, hid);
        for j in 0..hid {
            let (r, z, n, hn) = (c.r[j], c.z[j], c.n[j], c.hn[j]);
            let dn = go[j] * (1.0 - z);
            let dz = go[j] * (hprev[j] - n);
            gh.row_mut(0)[j] = go[j] * z;
            let dn_pre = dn * (1.0 - n * n);
            let dr = dn_pre * hn;
            let dr_pre = dr * r * (1.0 - r);
            let dz_pre = dz * z * (1.0 - z);
            gx.row_mut(0)[j] = dr_pre;
            gx.row_mut(0)[hid + j] = dz_pre;
            gx.row_mut(0)[2 * hid + j] = dn_pre;
            gh_proj.row_mut(0)[j] = dr_pre;
            gh_proj.row_mut(0)[hid + j] = dz_pre;
            gh_proj.row_mut(0)[2 * hid + j] = dn_pre * r;
        }
        let w = self.value(c.w_hh);
        let gh_from_proj = gh_proj.matmul_t(w);
        gh.add_assign(&gh_from_proj);
        let gw = self.value(c.h).t_matmul(&gh_proj);
        accumulate(grads, self, c.xproj, &gx);
        accumulate(grads, self, c.h, &gh);
        accumulate(grads, self, c.w_hh, &gw);
        accumulate(grads, self, c.b_hh, &gh_proj);
    }
}

fn slot<'a>(grads: &'a mut [Option<Matrix>], v: Var, shape: (usize, usize)) -> &'a mut Matrix {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
}

fn accumulate(grads: &mut [Option<Matrix>], tape: &Tape, v: Var, g: &Matrix) {
    if matches!(tape.nodes[v.0].op, Op::Leaf) {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(g),
        slot @ None => *slot = Some(g.clone()),
    }
}

/// Closed-form KL between diagonal Gaussians, summed over all entries.
pub fn kl_value(mu_q: &Matrix, sigma_q: &Matrix, prior: Option<(&Matrix, &Matrix)>) -> f64 {
    let mut total = 0.0;
    for idx in 0..mu_q.len() {
        let (m1, s1) = (mu_q.data()[idx], sigma_q.data()[idx]);
        let (m2, s2) = match prior {
            Some((mp, sp)) => (mp.data()[idx], sp.data()[idx]),
            None => (0.0, 1.0),
        };
        total += (s2 / s1).ln() + (s1 * s1 + (m1 - m2).powi(2)) / (2.0 * s2 * s2) - 0.5;
    }
    total
}
