//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Nodes are scalars stored in one value arena; an operation may produce a
//! single scalar ([`Var`]) or a contiguous block of scalars ([`Slab`]).
//! Dense layers are recorded as whole matrix products (backed by `dgemm`)
//! whose backward pass accumulates directly into a caller-owned parameter
//! gradient buffer, so network weights never appear as individual nodes.
//!
//! Invariant: the parameter array passed to [`Tape::backward`] must be the
//! same (unmodified) array the forward pass was recorded against.

use crate::error::{Error, Result};

/// Index of a scalar node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub u32);

/// A contiguous range of scalar nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slab {
    pub start: u32,
    pub len: u32,
}

impl Slab {
    pub fn at(&self, i: usize) -> Var {
        debug_assert!((i as u32) < self.len);
        Var(self.start + i as u32)
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

const NO_BIAS: u32 = u32::MAX;

#[derive(Debug)]
enum Op {
    // Scalar arithmetic.
    Add { a: Var, b: Var, out: Var },
    Sub { a: Var, b: Var, out: Var },
    Mul { a: Var, b: Var, out: Var },
    Div { a: Var, b: Var, out: Var },
    Neg { a: Var, out: Var },
    Exp { a: Var, out: Var },
    Ln { a: Var, out: Var },
    Sqrt { a: Var, out: Var },
    Sin { a: Var, out: Var },
    Cos { a: Var, out: Var },
    AcosClamp { a: Var, out: Var },
    Sigmoid { a: Var, out: Var },
    Elu { a: Var, out: Var },
    Abs { a: Var, out: Var },
    AddC { a: Var, out: Var },
    MulC { a: Var, c: f64, out: Var },
    CSub { a: Var, out: Var },
    MaxC { a: Var, c: f64, out: Var },
    MinC { a: Var, c: f64, out: Var },
    // Parameter access.
    ParamRead { off: u32, out: Slab },
    // Elementwise vector ops.
    AddV { a: Slab, b: Slab, out: Slab },
    SubV { a: Slab, b: Slab, out: Slab },
    MulV { a: Slab, b: Slab, out: Slab },
    ScaleV { a: Slab, c: f64, out: Slab },
    EluV { a: Slab, out: Slab },
    EluGradV { a: Slab, out: Slab },
    SigmoidV { a: Slab, out: Slab },
    SumV { a: Slab, out: Var },
    DotV { a: Slab, b: Slab, out: Var },
    Gather { idx: Vec<u32>, out: Slab },
    MulRowB { a: Slab, row: Slab, n: u32, out: Slab },
    // Dense layers (weights live in the parameter array, not on the tape).
    // W is row-major [out_dim x in_dim]; X and outputs are row-major with one
    // sample per row.
    MatMul { w_off: u32, b_off: u32, in_dim: u32, out_dim: u32, n: u32, x: Slab, out: Slab },
    MatMulT { w_off: u32, in_dim: u32, out_dim: u32, n: u32, x: Slab, out: Slab },
    // Positional encoding: rows [x, (sin, cos) per axis per frequency],
    // frequencies 2^k * pi.
    PosEnc { x: Slab, freqs: u32, n: u32, out: Slab },
    // Pullback of the encoding Jacobian: out = J_enc(x)^T * g, expressed via
    // the stored encoding values so second derivatives stay exact.
    PosEncPullback { enc: Slab, g: Slab, freqs: u32, n: u32, out: Slab },
}

#[derive(Debug, Default)]
pub struct Tape {
    ops: Vec<Op>,
    vals: Vec<f64>,
    adj: Vec<f64>,
    /// Count of non-finite adjoints zeroed during the last backward pass.
    pub nonfinite_adjoints: u64,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Drop all recorded state, keeping allocation capacity.
    pub fn reset(&mut self) {
        self.ops.clear();
        self.vals.clear();
    }

    pub fn num_nodes(&self) -> usize {
        self.vals.len()
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    pub fn val(&self, v: Var) -> f64 {
        self.vals[v.0 as usize]
    }

    pub fn slab_vals(&self, s: Slab) -> &[f64] {
        &self.vals[s.start as usize..(s.start + s.len) as usize]
    }

    /// Adjoint of a node after `backward`.
    pub fn adjoint(&self, v: Var) -> f64 {
        self.adj[v.0 as usize]
    }

    pub fn slab_adjoints(&self, s: Slab) -> &[f64] {
        &self.adj[s.start as usize..(s.start + s.len) as usize]
    }

    fn alloc(&mut self, len: usize) -> Slab {
        let start = self.vals.len() as u32;
        self.vals.resize(self.vals.len() + len, 0.0);
        Slab {
            start,
            len: len as u32,
        }
    }

    // ---- leaves ------------------------------------------------------

    /// Differentiable input node; its adjoint is readable after backward.
    pub fn leaf(&mut self, v: f64) -> Var {
        let s = self.alloc(1);
        self.vals[s.start as usize] = v;
        s.at(0)
    }

    pub fn leaf_slice(&mut self, v: &[f64]) -> Slab {
        let s = self.alloc(v.len());
        self.vals[s.start as usize..(s.start + s.len) as usize].copy_from_slice(v);
        s
    }

    /// Constant node (gradient is discarded).
    pub fn constant(&mut self, v: f64) -> Var {
        self.leaf(v)
    }

    pub fn const_slice(&mut self, v: &[f64]) -> Slab {
        self.leaf_slice(v)
    }

    /// Copy a parameter segment onto the tape; backward accumulates the
    /// segment's gradient into the parameter gradient buffer.
    pub fn param_read(&mut self, params: &[f64], off: usize, len: usize) -> Slab {
        let out = self.alloc(len);
        self.vals[out.start as usize..(out.start + out.len) as usize]
            .copy_from_slice(&params[off..off + len]);
        self.ops.push(Op::ParamRead {
            off: off as u32,
            out,
        });
        out
    }

    // ---- scalar ops --------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a) + self.val(b);
        let out = self.leaf(v);
        self.ops.push(Op::Add { a, b, out });
        out
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a) - self.val(b);
        let out = self.leaf(v);
        self.ops.push(Op::Sub { a, b, out });
        out
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a) * self.val(b);
        let out = self.leaf(v);
        self.ops.push(Op::Mul { a, b, out });
        out
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a) / self.val(b);
        let out = self.leaf(v);
        self.ops.push(Op::Div { a, b, out });
        out
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = -self.val(a);
        let out = self.leaf(v);
        self.ops.push(Op::Neg { a, out });
        out
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.val(a).exp();
        let out = self.leaf(v);
        self.ops.push(Op::Exp { a, out });
        out
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.val(a).ln();
        let out = self.leaf(v);
        self.ops.push(Op::Ln { a, out });
        out
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.val(a).sqrt();
        let out = self.leaf(v);
        self.ops.push(Op::Sqrt { a, out });
        out
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let v = self.val(a).sin();
        let out = self.leaf(v);
        self.ops.push(Op::Sin { a, out });
        out
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let v = self.val(a).cos();
        let out = self.leaf(v);
        self.ops.push(Op::Cos { a, out });
        out
    }

    /// arccos of the input clamped to [-1, 1].
    pub fn acos_clamped(&mut self, a: Var) -> Var {
        let v = self.val(a).clamp(-1.0, 1.0).acos();
        let out = self.leaf(v);
        self.ops.push(Op::AcosClamp { a, out });
        out
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = stable_sigmoid(self.val(a));
        let out = self.leaf(v);
        self.ops.push(Op::Sigmoid { a, out });
        out
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let x = self.val(a);
        let v = if x > 0.0 { x } else { x.exp() - 1.0 };
        let out = self.leaf(v);
        self.ops.push(Op::Elu { a, out });
        out
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.val(a).abs();
        let out = self.leaf(v);
        self.ops.push(Op::Abs { a, out });
        out
    }

    pub fn add_c(&mut self, a: Var, c: f64) -> Var {
        let v = self.val(a) + c;
        let out = self.leaf(v);
        self.ops.push(Op::AddC { a, out });
        out
    }

    pub fn mul_c(&mut self, a: Var, c: f64) -> Var {
        let v = self.val(a) * c;
        let out = self.leaf(v);
        self.ops.push(Op::MulC { a, c, out });
        out
    }

    /// c - a
    pub fn c_sub(&mut self, c: f64, a: Var) -> Var {
        let v = c - self.val(a);
        let out = self.leaf(v);
        self.ops.push(Op::CSub { a, out });
        out
    }

    pub fn max_c(&mut self, a: Var, c: f64) -> Var {
        let v = self.val(a).max(c);
        let out = self.leaf(v);
        self.ops.push(Op::MaxC { a, c, out });
        out
    }

    pub fn min_c(&mut self, a: Var, c: f64) -> Var {
        let v = self.val(a).min(c);
        let out = self.leaf(v);
        self.ops.push(Op::MinC { a, c, out });
        out
    }

    // ---- vector ops ----------------------------------------------------

    pub fn add_v(&mut self, a: Slab, b: Slab) -> Slab {
        assert_eq!(a.len, b.len);
        let out = self.alloc(a.len());
        for i in 0..a.len() {
            self.vals[out.start as usize + i] =
                self.vals[a.start as usize + i] + self.vals[b.start as usize + i];
        }
        self.ops.push(Op::AddV { a, b, out });
        out
    }

    pub fn sub_v(&mut self, a: Slab, b: Slab) -> Slab {
        assert_eq!(a.len, b.len);
        let out = self.alloc(a.len());
        for i in 0..a.len() {
            self.vals[out.start as usize + i] =
                self.vals[a.start as usize + i] - self.vals[b.start as usize + i];
        }
        self.ops.push(Op::SubV { a, b, out });
        out
    }

    pub fn mul_v(&mut self, a: Slab, b: Slab) -> Slab {
        assert_eq!(a.len, b.len);
        let out = self.alloc(a.len());
        for i in 0..a.len() {
            self.vals[out.start as usize + i] =
                self.vals[a.start as usize + i] * self.vals[b.start as usize + i];
        }
        self.ops.push(Op::MulV { a, b, out });
        out
    }

    pub fn scale_v(&mut self, a: Slab, c: f64) -> Slab {
        let out = self.alloc(a.len());
        for i in 0..a.len() {
            self.vals[out.start as usize + i] = self.vals[a.start as usize + i] * c;
        }
        self.ops.push(Op::ScaleV { a, c, out });
        out
    }

    pub fn elu_v(&mut self, a: Slab) -> Slab {
        let out = self.alloc(a.len());
        for i in 0..a.len() {
            let x = self.vals[a.start as usize + i];
            self.vals[out.start as usize + i] = if x > 0.0 { x } else { x.exp() - 1.0 };
        }
        self.ops.push(Op::EluV { a, out });
        out
    }

    /// Elementwise ELU derivative (exactly 1 at 0) as a first-class value, so
    /// gradients of gradients stay exact.
    pub fn elu_grad_v(&mut self, a: Slab) -> Slab {
        let out = self.alloc(a.len());
        for i in 0..a.len() {
            let x = self.vals[a.start as usize + i];
            self.vals[out.start as usize + i] = if x > 0.0 { 1.0 } else { x.exp() };
        }
        self.ops.push(Op::EluGradV { a, out });
        out
    }

    pub fn sigmoid_v(&mut self, a: Slab) -> Slab {
        let out = self.alloc(a.len());
        for i in 0..a.len() {
            self.vals[out.start as usize + i] = stable_sigmoid(self.vals[a.start as usize + i]);
        }
        self.ops.push(Op::SigmoidV { a, out });
        out
    }

    pub fn sum_v(&mut self, a: Slab) -> Var {
        let v = self.slab_vals(a).iter().sum();
        let out = self.leaf(v);
        self.ops.push(Op::SumV { a, out });
        out
    }

    pub fn dot_v(&mut self, a: Slab, b: Slab) -> Var {
        assert_eq!(a.len, b.len);
        let mut v = 0.0;
        for i in 0..a.len() {
            v += self.vals[a.start as usize + i] * self.vals[b.start as usize + i];
        }
        let out = self.leaf(v);
        self.ops.push(Op::DotV { a, b, out });
        out
    }

    /// Gather arbitrary nodes into a contiguous block.
    pub fn gather(&mut self, idx: Vec<u32>) -> Slab {
        let out = self.alloc(idx.len());
        for (i, &src) in idx.iter().enumerate() {
            self.vals[out.start as usize + i] = self.vals[src as usize];
        }
        self.ops.push(Op::Gather { idx, out });
        out
    }

    /// Elementwise product of each row of `a` (n rows) with a shared row.
    pub fn mul_row_broadcast(&mut self, a: Slab, row: Slab, n: usize) -> Slab {
        let len = row.len();
        assert_eq!(a.len(), n * len);
        let out = self.alloc(a.len());
        for p in 0..n {
            for j in 0..len {
                self.vals[out.start as usize + p * len + j] =
                    self.vals[a.start as usize + p * len + j] * self.vals[row.start as usize + j];
            }
        }
        self.ops.push(Op::MulRowB {
            a,
            row,
            n: n as u32,
            out,
        });
        out
    }

    /// Dense layer: rows of `x` (n x in_dim) times `W^T` plus optional bias.
    /// `W` is row-major `[out_dim x in_dim]` at `w_off` in the parameter
    /// array; bias is `[out_dim]` at `b_off`.
    pub fn matmul(
        &mut self,
        params: &[f64],
        w_off: usize,
        b_off: Option<usize>,
        in_dim: usize,
        out_dim: usize,
        x: Slab,
    ) -> Slab {
        let n = x.len() / in_dim;
        assert_eq!(x.len(), n * in_dim);
        let out = self.alloc(n * out_dim);
        unsafe {
            let a = self.vals.as_ptr().add(x.start as usize);
            let b = params.as_ptr().add(w_off);
            let c = self.vals.as_mut_ptr().add(out.start as usize);
            // out = X * W^T : W^T element (i, j) = W[j * in_dim + i]
            matrixmultiply::dgemm(
                n,
                in_dim,
                out_dim,
                1.0,
                a,
                in_dim as isize,
                1,
                b,
                1,
                in_dim as isize,
                0.0,
                c,
                out_dim as isize,
                1,
            );
        }
        if let Some(boff) = b_off {
            let bias = &params[boff..boff + out_dim];
            for p in 0..n {
                let row =
                    &mut self.vals[out.start as usize + p * out_dim..out.start as usize + (p + 1) * out_dim];
                for (v, b) in row.iter_mut().zip(bias) {
                    *v += *b;
                }
            }
        }
        self.ops.push(Op::MatMul {
            w_off: w_off as u32,
            b_off: b_off.map_or(NO_BIAS, |b| b as u32),
            in_dim: in_dim as u32,
            out_dim: out_dim as u32,
            n: n as u32,
            x,
            out,
        });
        out
    }

    /// Rows of `x` (n x out_dim) times `W` (row-major `[out_dim x in_dim]`):
    /// per row this is `W^T v`, the transposed layer used to build tracked
    /// input gradients.
    pub fn matmul_t(
        &mut self,
        params: &[f64],
        w_off: usize,
        in_dim: usize,
        out_dim: usize,
        x: Slab,
    ) -> Slab {
        let n = x.len() / out_dim;
        assert_eq!(x.len(), n * out_dim);
        let out = self.alloc(n * in_dim);
        unsafe {
            let a = self.vals.as_ptr().add(x.start as usize);
            let b = params.as_ptr().add(w_off);
            let c = self.vals.as_mut_ptr().add(out.start as usize);
            matrixmultiply::dgemm(
                n,
                out_dim,
                in_dim,
                1.0,
                a,
                out_dim as isize,
                1,
                b,
                in_dim as isize,
                1,
                0.0,
                c,
                in_dim as isize,
                1,
            );
        }
        self.ops.push(Op::MatMulT {
            w_off: w_off as u32,
            in_dim: in_dim as u32,
            out_dim: out_dim as u32,
            n: n as u32,
            x,
            out,
        });
        out
    }

    /// Positional encoding of n 3-vectors: rows
    /// `[x, sin(w_k x_a), cos(w_k x_a) ...]` with `w_k = 2^k pi`.
    pub fn pos_enc(&mut self, x: Slab, freqs: usize) -> Slab {
        let n = x.len() / 3;
        assert_eq!(x.len(), n * 3);
        let row = 3 + 6 * freqs;
        let out = self.alloc(n * row);
        for p in 0..n {
            let xs = [
                self.vals[x.start as usize + p * 3],
                self.vals[x.start as usize + p * 3 + 1],
                self.vals[x.start as usize + p * 3 + 2],
            ];
            let base = out.start as usize + p * row;
            self.vals[base..base + 3].copy_from_slice(&xs);
            for (a, &xa) in xs.iter().enumerate() {
                for k in 0..freqs {
                    let w = (1u64 << k) as f64 * std::f64::consts::PI;
                    let (s, c) = (w * xa).sin_cos();
                    self.vals[base + 3 + a * 2 * freqs + 2 * k] = s;
                    self.vals[base + 3 + a * 2 * freqs + 2 * k + 1] = c;
                }
            }
        }
        self.ops.push(Op::PosEnc {
            x,
            freqs: freqs as u32,
            n: n as u32,
            out,
        });
        out
    }

    /// `J_enc(x)^T g` for each row, expressed through the stored encoding
    /// values; the tracked result carries exact second derivatives.
    pub fn pos_enc_pullback(&mut self, enc: Slab, g: Slab, freqs: usize) -> Slab {
        let row = 3 + 6 * freqs;
        let n = enc.len() / row;
        assert_eq!(enc.len(), n * row);
        assert_eq!(g.len(), n * row);
        let out = self.alloc(n * 3);
        for p in 0..n {
            let ebase = enc.start as usize + p * row;
            let gbase = g.start as usize + p * row;
            for a in 0..3 {
                let mut acc = self.vals[gbase + a];
                for k in 0..freqs {
                    let w = (1u64 << k) as f64 * std::f64::consts::PI;
                    let si = ebase + 3 + a * 2 * freqs + 2 * k;
                    let gsi = gbase + 3 + a * 2 * freqs + 2 * k;
                    acc += w * (self.vals[si + 1] * self.vals[gsi] - self.vals[si] * self.vals[gsi + 1]);
                }
                self.vals[out.start as usize + p * 3 + a] = acc;
            }
        }
        self.ops.push(Op::PosEncPullback {
            enc,
            g,
            freqs: freqs as u32,
            n: n as u32,
            out,
        });
        out
    }

    // ---- backward -----------------------------------------------------

    /// Reverse sweep from `seed` (adjoint 1). Parameter-segment gradients
    /// accumulate into `param_grad`; node adjoints are kept for inspection.
    pub fn backward(&mut self, seed: Var, params: &[f64], param_grad: &mut [f64]) -> Result<()> {
        self.backward_seeded(&[(seed, 1.0)], params, param_grad)
    }

    pub fn backward_seeded(
        &mut self,
        seeds: &[(Var, f64)],
        params: &[f64],
        param_grad: &mut [f64],
    ) -> Result<()> {
        if self.vals.is_empty() {
            return Err(Error::InvalidArgument(
                "backward called before any forward computation".to_string(),
            ));
        }
        for (seed, _) in seeds {
            if seed.0 as usize >= self.vals.len() {
                return Err(Error::InvalidArgument(format!(
                    "seed node {} outside tape of {} nodes",
                    seed.0,
                    self.vals.len()
                )));
            }
        }
        self.adj.clear();
        self.adj.resize(self.vals.len(), 0.0);
        for (seed, w) in seeds {
            self.adj[seed.0 as usize] += w;
        }
        // Borrow-split: adjoints and values are indexed independently below.
        for op in self.ops.iter().rev() {
            step_backward(op, &self.vals, &mut self.adj, params, param_grad);
        }
        Ok(())
    }
}

#[inline]
fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn step_backward(op: &Op, vals: &[f64], adj: &mut [f64], params: &[f64], param_grad: &mut [f64]) {
    match op {
        Op::Add { a, b, out } => {
            let o = adj[out.0 as usize];
            adj[a.0 as usize] += o;
            adj[b.0 as usize] += o;
        }
        Op::Sub { a, b, out } => {
            let o = adj[out.0 as usize];
            adj[a.0 as usize] += o;
            adj[b.0 as usize] -= o;
        }
        Op::Mul { a, b, out } => {
            let o = adj[out.0 as usize];
            adj[a.0 as usize] += o * vals[b.0 as usize];
            adj[b.0 as usize] += o * vals[a.0 as usize];
        }
        Op::Div { a, b, out } => {
            let o = adj[out.0 as usize];
            let vb = vals[b.0 as usize];
            adj[a.0 as usize] += o / vb;
            adj[b.0 as usize] -= o * vals[out.0 as usize] / vb;
        }
        Op::Neg { a, out } => {
            adj[a.0 as usize] -= adj[out.0 as usize];
        }
        Op::Exp { a, out } => {
            adj[a.0 as usize] += adj[out.0 as usize] * vals[out.0 as usize];
        }
        Op::Ln { a, out } => {
            adj[a.0 as usize] += adj[out.0 as usize] / vals[a.0 as usize];
        }
        Op::Sqrt { a, out } => {
            adj[a.0 as usize] += adj[out.0 as usize] * 0.5 / vals[out.0 as usize];
        }
        Op::Sin { a, out } => {
            adj[a.0 as usize] += adj[out.0 as usize] * vals[a.0 as usize].cos();
        }
        Op::Cos { a, out } => {
            adj[a.0 as usize] -= adj[out.0 as usize] * vals[a.0 as usize].sin();
        }
        Op::AcosClamp { a, out } => {
            let x = vals[a.0 as usize];
            if x.abs() < 1.0 {
                adj[a.0 as usize] -= adj[out.0 as usize] / (1.0 - x * x).sqrt();
            }
        }
        Op::Sigmoid { a, out } => {
            let s = vals[out.0 as usize];
            adj[a.0 as usize] += adj[out.0 as usize] * s * (1.0 - s);
        }
        Op::Elu { a, out } => {
            let x = vals[a.0 as usize];
            let d = if x > 0.0 { 1.0 } else { vals[out.0 as usize] + 1.0 };
            adj[a.0 as usize] += adj[out.0 as usize] * d;
        }
        Op::Abs { a, out } => {
            let x = vals[a.0 as usize];
            let d = if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            };
            adj[a.0 as usize] += adj[out.0 as usize] * d;
        }
        Op::AddC { a, out } => {
            adj[a.0 as usize] += adj[out.0 as usize];
        }
        Op::MulC { a, c, out } => {
            adj[a.0 as usize] += adj[out.0 as usize] * c;
        }
        Op::CSub { a, out } => {
            adj[a.0 as usize] -= adj[out.0 as usize];
        }
        Op::MaxC { a, c, out } => {
            if vals[a.0 as usize] > *c {
                adj[a.0 as usize] += adj[out.0 as usize];
            }
        }
        Op::MinC { a, c, out } => {
            if vals[a.0 as usize] < *c {
                adj[a.0 as usize] += adj[out.0 as usize];
            }
        }
        Op::ParamRead { off, out } => {
            let (s, l) = (out.start as usize, out.len());
            for i in 0..l {
                param_grad[*off as usize + i] += adj[s + i];
            }
        }
        Op::AddV { a, b, out } => {
            for i in 0..out.len() {
                let o = adj[out.start as usize + i];
                adj[a.start as usize + i] += o;
                adj[b.start as usize + i] += o;
            }
        }
        Op::SubV { a, b, out } => {
            for i in 0..out.len() {
                let o = adj[out.start as usize + i];
                adj[a.start as usize + i] += o;
                adj[b.start as usize + i] -= o;
            }
        }
        Op::MulV { a, b, out } => {
            for i in 0..out.len() {
                let o = adj[out.start as usize + i];
                adj[a.start as usize + i] += o * vals[b.start as usize + i];
                adj[b.start as usize + i] += o * vals[a.start as usize + i];
            }
        }
        Op::ScaleV { a, c, out } => {
            for i in 0..out.len() {
                adj[a.start as usize + i] += adj[out.start as usize + i] * c;
            }
        }
        Op::EluV { a, out } => {
            for i in 0..out.len() {
                let x = vals[a.start as usize + i];
                let d = if x > 0.0 {
                    1.0
                } else {
                    vals[out.start as usize + i] + 1.0
                };
                adj[a.start as usize + i] += adj[out.start as usize + i] * d;
            }
        }
        Op::EluGradV { a, out } => {
            for i in 0..out.len() {
                let x = vals[a.start as usize + i];
                if x <= 0.0 {
                    adj[a.start as usize + i] +=
                        adj[out.start as usize + i] * vals[out.start as usize + i];
                }
            }
        }
        Op::SigmoidV { a, out } => {
            for i in 0..out.len() {
                let s = vals[out.start as usize + i];
                adj[a.start as usize + i] += adj[out.start as usize + i] * s * (1.0 - s);
            }
        }
        Op::SumV { a, out } => {
            let o = adj[out.0 as usize];
            for i in 0..a.len() {
                adj[a.start as usize + i] += o;
            }
        }
        Op::DotV { a, b, out } => {
            let o = adj[out.0 as usize];
            for i in 0..a.len() {
                adj[a.start as usize + i] += o * vals[b.start as usize + i];
                adj[b.start as usize + i] += o * vals[a.start as usize + i];
            }
        }
        Op::Gather { idx, out } => {
            for (i, &src) in idx.iter().enumerate() {
                adj[src as usize] += adj[out.start as usize + i];
            }
        }
        Op::MulRowB { a, row, n, out } => {
            let len = row.len();
            for p in 0..*n as usize {
                for j in 0..len {
                    let o = adj[out.start as usize + p * len + j];
                    adj[a.start as usize + p * len + j] += o * vals[row.start as usize + j];
                    adj[row.start as usize + j] += o * vals[a.start as usize + p * len + j];
                }
            }
        }
        Op::MatMul {
            w_off,
            b_off,
            in_dim,
            out_dim,
            n,
            x,
            out,
        } => {
            let (n, in_dim, out_dim) = (*n as usize, *in_dim as usize, *out_dim as usize);
            unsafe {
                // x_adj += out_adj * W
                matrixmultiply::dgemm(
                    n,
                    out_dim,
                    in_dim,
                    1.0,
                    adj.as_ptr().add(out.start as usize),
                    out_dim as isize,
                    1,
                    params.as_ptr().add(*w_off as usize),
                    in_dim as isize,
                    1,
                    1.0,
                    adj.as_mut_ptr().add(x.start as usize),
                    in_dim as isize,
                    1,
                );
                // W_grad += out_adj^T * X
                matrixmultiply::dgemm(
                    out_dim,
                    n,
                    in_dim,
                    1.0,
                    adj.as_ptr().add(out.start as usize),
                    1,
                    out_dim as isize,
                    vals.as_ptr().add(x.start as usize),
                    in_dim as isize,
                    1,
                    1.0,
                    param_grad.as_mut_ptr().add(*w_off as usize),
                    in_dim as isize,
                    1,
                );
            }
            if *b_off != NO_BIAS {
                let boff = *b_off as usize;
                for p in 0..n {
                    for j in 0..out_dim {
                        param_grad[boff + j] += adj[out.start as usize + p * out_dim + j];
                    }
                }
            }
        }
        Op::MatMulT {
            w_off,
            in_dim,
            out_dim,
            n,
            x,
            out,
        } => {
            let (n, in_dim, out_dim) = (*n as usize, *in_dim as usize, *out_dim as usize);
            unsafe {
                // x_adj += out_adj * W^T
                matrixmultiply::dgemm(
                    n,
                    in_dim,
                    out_dim,
                    1.0,
                    adj.as_ptr().add(out.start as usize),
                    in_dim as isize,
                    1,
                    params.as_ptr().add(*w_off as usize),
                    1,
                    in_dim as isize,
                    1.0,
                    adj.as_mut_ptr().add(x.start as usize),
                    out_dim as isize,
                    1,
                );
                // W_grad += X^T * out_adj
                matrixmultiply::dgemm(
                    out_dim,
                    n,
                    in_dim,
                    1.0,
                    vals.as_ptr().add(x.start as usize),
                    1,
                    out_dim as isize,
                    adj.as_ptr().add(out.start as usize),
                    in_dim as isize,
                    1,
                    1.0,
                    param_grad.as_mut_ptr().add(*w_off as usize),
                    in_dim as isize,
                    1,
                );
            }
        }
        Op::PosEnc { x, freqs, n, out } => {
            let freqs = *freqs as usize;
            let row = 3 + 6 * freqs;
            for p in 0..*n as usize {
                let base = out.start as usize + p * row;
                for a in 0..3 {
                    let mut acc = adj[base + a];
                    for k in 0..freqs {
                        let w = (1u64 << k) as f64 * std::f64::consts::PI;
                        let si = base + 3 + a * 2 * freqs + 2 * k;
                        // d sin(wx) = w cos(wx), d cos(wx) = -w sin(wx)
                        acc += w * (vals[si + 1] * adj[si] - vals[si] * adj[si + 1]);
                    }
                    adj[x.start as usize + p * 3 + a] += acc;
                }
            }
        }
        Op::PosEncPullback {
            enc,
            g,
            freqs,
            n,
            out,
        } => {
            let freqs = *freqs as usize;
            let row = 3 + 6 * freqs;
            for p in 0..*n as usize {
                let ebase = enc.start as usize + p * row;
                let gbase = g.start as usize + p * row;
                let obase = out.start as usize + p * 3;
                for a in 0..3 {
                    let o = adj[obase + a];
                    if o == 0.0 {
                        continue;
                    }
                    adj[gbase + a] += o;
                    for k in 0..freqs {
                        let w = (1u64 << k) as f64 * std::f64::consts::PI;
                        let si = ebase + 3 + a * 2 * freqs + 2 * k;
                        let gsi = gbase + 3 + a * 2 * freqs + 2 * k;
                        adj[gsi] += o * w * vals[si + 1];
                        adj[gsi + 1] -= o * w * vals[si];
                        adj[si + 1] += o * w * vals[gsi];
                        adj[si] -= o * w * vals[gsi + 1];
                    }
                }
            }
        }
    }
}
