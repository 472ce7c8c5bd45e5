use super::tape::{accumulate, Node, Tape, Var};
use super::{numel, Element, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// Mean-centred, variance-scaled.
    Layer,
    /// Root-mean-square scaled, no centring.
    Rms,
}

pub(super) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Reshape(Var),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    IndexSelect {
        x: Var,
        axis: usize,
        indices: Vec<usize>,
    },
    Silu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Norm {
        x: Var,
        gain: Var,
        bias: Option<Var>,
        kind: NormKind,
        rstd: Vec<f64>,
    },
    Rope {
        x: Var,
        cos: Vec<f64>,
        sin: Vec<f64>,
    },
    CausalMask {
        x: Var,
        offset: usize,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

impl<T: Element> Op<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::MatMul { .. } => "matmul",
            Op::Permute { .. } => "permute",
            Op::Reshape(..) => "reshape",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::IndexSelect { .. } => "index_select",
            Op::Silu(..) => "silu",
            Op::Softmax { .. } => "softmax",
            Op::Norm { .. } => "norm",
            Op::Rope { .. } => "rope",
            Op::CausalMask { .. } => "causal_mask",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    pub fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Reshape(x)
            | Op::Silu(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Permute { x, .. }
            | Op::Slice { x, .. }
            | Op::IndexSelect { x, .. }
            | Op::Softmax { x, .. }
            | Op::Rope { x, .. }
            | Op::CausalMask { x, .. } => vec![*x],
            Op::Concat { xs, .. } => xs.clone(),
            Op::Norm { x, gain, bias, .. } => {
                let mut v = vec![*x, *gain];
                v.extend(bias.iter().copied());
                v
            }
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    pub fn backward(
        &self,
        nodes: &[Node<T>],
        idx: usize,
        g: Vec<T>,
        grads: &mut [Option<Vec<T>>],
    ) {
        let val = |v: &Var| &nodes[v.0].value;
        let out = &nodes[idx].value;
        match self {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(nodes, grads, *b, g.clone());
                accumulate(nodes, grads, *a, g);
            }
            Op::Sub(a, b) => {
                accumulate(nodes, grads, *b, g.iter().map(|&x| -x).collect());
                accumulate(nodes, grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a).data(), val(b).data());
                let ga = g.iter().zip(bv).map(|(&g, &b)| g * b).collect();
                let gb = g.iter().zip(av).map(|(&g, &a)| g * a).collect();
                accumulate(nodes, grads, *a, ga);
                accumulate(nodes, grads, *b, gb);
            }
            Op::AddBias(x, b) => {
                let n = val(b).len();
                let mut gb = vec![T::zero(); n];
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(s, &r)| *s = *s + r);
                }
                accumulate(nodes, grads, *b, gb);
                accumulate(nodes, grads, *x, g);
            }
            Op::Scale(x, c) => {
                accumulate(nodes, grads, *x, g.iter().map(|&v| v * *c).collect());
            }
            &Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            } => {
                let (av, bv) = (val(&a).data(), val(&b).data());
                let shared_b = batch == 1 && val(&b).rank() == 2;
                if nodes[a.0].needs_grad {
                    let mut ga = vec![T::zero(); av.len()];
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let bs = if shared_b { bv } else { &bv[bi * k * n..(bi + 1) * k * n] };
                        // dA = dC · Bᵀ
                        let (rs, cs) = if trans_b { (k as isize, 1) } else { (1, n as isize) };
                        T::gemm(
                            m,
                            n,
                            k,
                            gs,
                            n as isize,
                            1,
                            bs,
                            rs,
                            cs,
                            T::zero(),
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                    accumulate(nodes, grads, a, ga);
                }
                if nodes[b.0].needs_grad {
                    let mut gb = vec![T::zero(); bv.len()];
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let as_ = &av[bi * m * k..(bi + 1) * m * k];
                        let (off, beta) = if shared_b { (0, T::one()) } else { (bi * k * n, T::zero()) };
                        let dst = &mut gb[off..off + k * n];
                        if trans_b {
                            // dB[n×k] = dCᵀ · A
                            T::gemm(n, m, k, gs, 1, n as isize, as_, k as isize, 1, beta, dst);
                        } else {
                            // dB[k×n] = Aᵀ · dC
                            T::gemm(k, m, n, as_, 1, k as isize, gs, n as isize, 1, beta, dst);
                        }
                    }
                    accumulate(nodes, grads, b, gb);
                }
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let gx = permute_data(&g, out.shape(), &inverse);
                accumulate(nodes, grads, *x, gx);
            }
            Op::Reshape(x) => accumulate(nodes, grads, *x, g),
            &Op::Slice { x, axis, start } => {
                let xs = val(&x).shape();
                let (outer, extent, inner) = split_axis(xs, axis);
                let len = out.shape()[axis];
                let mut gx = vec![T::zero(); val(&x).len()];
                for o in 0..outer {
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    let dst_start = (o * extent + start) * inner;
                    gx[dst_start..dst_start + len * inner].copy_from_slice(src);
                }
                accumulate(nodes, grads, x, gx);
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for x in xs {
                    let e = val(x).shape()[*axis];
                    let mut gx = Vec::with_capacity(outer * e * inner);
                    for o in 0..outer {
                        let s = (o * total + offset) * inner;
                        gx.extend_from_slice(&g[s..s + e * inner]);
                    }
                    offset += e;
                    accumulate(nodes, grads, *x, gx);
                }
            }
            Op::IndexSelect { x, axis, indices } => {
                let xs = val(x).shape();
                let (outer, extent, inner) = split_axis(xs, *axis);
                let mut gx = vec![T::zero(); val(x).len()];
                let sel = indices.len();
                for o in 0..outer {
                    for (j, &src) in indices.iter().enumerate() {
                        let gs = &g[(o * sel + j) * inner..(o * sel + j + 1) * inner];
                        let d = &mut gx[(o * extent + src) * inner..(o * extent + src + 1) * inner];
                        d.iter_mut().zip(gs).for_each(|(a, &b)| *a = *a + b);
                    }
                }
                accumulate(nodes, grads, *x, gx);
            }
            Op::Silu(x) => {
                let gx = val(x)
                    .data()
                    .iter()
                    .zip(&g)
                    .map(|(&z, &g)| {
                        let s = sigmoid(z);
                        g * s * (T::one() + z * (T::one() - s))
                    })
                    .collect();
                accumulate(nodes, grads, *x, gx);
            }
            &Op::Softmax { x, axis } => {
                let (outer, extent, inner) = split_axis(out.shape(), axis);
                let y = out.data();
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |e: usize| (o * extent + e) * inner + i;
                        let dot: T = (0..extent).map(|e| g[at(e)] * y[at(e)]).sum();
                        for e in 0..extent {
                            gx[at(e)] = y[at(e)] * (g[at(e)] - dot);
                        }
                    }
                }
                accumulate(nodes, grads, x, gx);
            }
            Op::Norm {
                x,
                gain,
                bias,
                kind,
                rstd,
            } => {
                let xv = val(x).data();
                let gv = val(gain).data();
                let d = gv.len();
                let mut gx = vec![T::zero(); xv.len()];
                let mut ggain = vec![0.0f64; d];
                let mut gbias = vec![0.0f64; d];
                let mut xhat = vec![0.0f64; d];
                let mut dxhat = vec![0.0f64; d];
                for (r, (xr, gr)) in xv.chunks(d).zip(g.chunks(d)).enumerate() {
                    let mean = match kind {
                        NormKind::Layer => xr.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64,
                        NormKind::Rms => 0.0,
                    };
                    for j in 0..d {
                        xhat[j] = (xr[j].as_f64() - mean) * rstd[r];
                        let gj = gr[j].as_f64();
                        dxhat[j] = gj * gv[j].as_f64();
                        ggain[j] += gj * xhat[j];
                        gbias[j] += gj;
                    }
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    let dst = &mut gx[r * d..(r + 1) * d];
                    for j in 0..d {
                        let centred = match kind {
                            NormKind::Layer => dxhat[j] - m1 - xhat[j] * m2,
                            NormKind::Rms => dxhat[j] - xhat[j] * m2,
                        };
                        dst[j] = T::of_f64(rstd[r] * centred);
                    }
                }
                accumulate(nodes, grads, *x, gx);
                accumulate(nodes, grads, *gain, ggain.into_iter().map(T::of_f64).collect());
                if let Some(b) = bias {
                    accumulate(nodes, grads, *b, gbias.into_iter().map(T::of_f64).collect());
                }
            }
            Op::Rope { x, cos, sin } => {
                let shape = out.shape();
                let d = shape[shape.len() - 1];
                let t = shape[shape.len() - 2];
                let mut gx = vec![T::zero(); g.len()];
                rotate(&g, &mut gx, t, d, cos, sin, true);
                accumulate(nodes, grads, *x, gx);
            }
            &Op::CausalMask { x, offset } => {
                let shape = out.shape();
                let tk = shape[shape.len() - 1];
                let tq = shape[shape.len() - 2];
                let mut gx = g;
                for (r, row) in gx.chunks_mut(tk).enumerate() {
                    let i = r % tq;
                    for (j, v) in row.iter_mut().enumerate() {
                        if j > i + offset {
                            *v = T::zero();
                        }
                    }
                }
                accumulate(nodes, grads, x, gx);
            }
            Op::Sum(x) => {
                let n = val(x).len();
                accumulate(nodes, grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = val(x).len();
                let v = g[0] / T::of_f64(n as f64);
                accumulate(nodes, grads, *x, vec![v; n]);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = probs.len() / targets.len();
                let scale = g[0] / T::of_f64(targets.len() as f64);
                let mut gx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gx[r * v + t] = gx[r * v + t] - scale;
                }
                accumulate(nodes, grads, *logits, gx);
            }
        }
    }
}

fn sigmoid<T: Element>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn permute_data<T: Copy>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let src: usize = idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum();
        out.push(data[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// Applies (or with `inverse`, undoes) the pairwise rotation to rows of `[.., t, d]`.
fn rotate<T: Element>(
    src: &[T],
    dst: &mut [T],
    t: usize,
    d: usize,
    cos: &[f64],
    sin: &[f64],
    inverse: bool,
) {
    let half = d / 2;
    for (r, (s, o)) in src.chunks(d).zip(dst.chunks_mut(d)).enumerate() {
        let pos = r % t;
        for i in 0..half {
            let c = T::of_f64(cos[pos * half + i]);
            let mut sn = T::of_f64(sin[pos * half + i]);
            if inverse {
                sn = -sn;
            }
            let (x0, x1) = (s[2 * i], s[2 * i + 1]);
            o[2 * i] = x0 * c - x1 * sn;
            o[2 * i + 1] = x0 * sn + x1 * c;
        }
    }
}

impl<T: Element> Tape<T> {
    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(a, b, op.name())?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape(), data)?;
        self.push(t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `x + b` with `b` broadcast along every axis but the last.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let n = *xs.last().ok_or_else(|| Error::shape("add_bias on a scalar"))?;
        if self.shape(b) != [n] {
            return Err(Error::shape(format!(
                "add_bias: bias {:?} against {:?}",
                self.shape(b),
                xs
            )));
        }
        let bv = self.value(b).data();
        let xv = self.value(x);
        let data = xv
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(bv).map(|(&r, &b)| r + b))
            .collect();
        let t = Tensor::new(xv.shape(), data)?;
        self.push(t, Op::AddBias(x, b))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape(), xv.data().iter().map(|&v| v * c).collect())?;
        self.push(t, Op::Scale(x, c))
    }

    /// Matrix product.
    ///
    /// `a` is `[.., m, k]`. If `b` is rank 2 (`[k, n]`) every leading row of `a`
    /// is multiplied by it; if both are rank 3 the product is batched over the
    /// first axis. With `trans_b` the stored `b` is `[n, k]` (or `[batch, n, k]`)
    /// and the product uses its transpose.
    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || Error::shape(format!("matmul: {ash:?} x {bsh:?} (trans_b={trans_b})"));
        if ash.len() < 2 {
            return Err(err());
        }
        let (batch, m, k, n, out_shape) = match bsh.len() {
            2 => {
                let k = ash[ash.len() - 1];
                let (bk, n) = if trans_b { (bsh[1], bsh[0]) } else { (bsh[0], bsh[1]) };
                if bk != k {
                    return Err(err());
                }
                let m = numel(&ash[..ash.len() - 1]);
                let mut out = ash[..ash.len() - 1].to_vec();
                out.push(n);
                (1, m, k, n, out)
            }
            3 if ash.len() == 3 && ash[0] == bsh[0] => {
                let (m, k) = (ash[1], ash[2]);
                let (bk, n) = if trans_b { (bsh[2], bsh[1]) } else { (bsh[1], bsh[2]) };
                if bk != k {
                    return Err(err());
                }
                (ash[0], m, k, n, vec![ash[0], m, n])
            }
            _ => return Err(err()),
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut c = vec![T::zero(); batch * m * n];
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        for bi in 0..batch {
            T::gemm(
                m,
                k,
                n,
                &av[bi * m * k..(bi + 1) * m * k],
                k as isize,
                1,
                &bv[bi * k * n..(bi + 1) * k * n],
                rsb,
                csb,
                T::zero(),
                &mut c[bi * m * n..(bi + 1) * m * n],
            );
        }
        let t = Tensor::new(&out_shape, c)?;
        self.push(
            t,
            Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::shape(format!("permute {axes:?} of {shape:?}")));
        }
        let data = permute_data(self.value(x).data(), &shape, axes);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let t = Tensor::new(&out_shape, data)?;
        self.push(
            t,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(t, Op::Reshape(x))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::shape(format!(
                "slice [{start}, {}) on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * extent + start) * inner;
            data.extend_from_slice(&src[s..s + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let t = Tensor::new(&out_shape, data)?;
        self.push(t, Op::Slice { x, axis, start })
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::shape("concat of nothing"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat axis {axis} of {base:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(format!("concat {s:?} with {base:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let e = self.shape(x)[axis];
                data.extend_from_slice(&self.value(x).data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut out_shape = base;
        out_shape[axis] = total;
        let t = Tensor::new(&out_shape, data)?;
        self.push(
            t,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        )
    }

    /// Gathers `indices` along `axis`; indices may repeat (gradients add up).
    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("index_select axis {axis} of {shape:?}")));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[axis]) {
            return Err(Error::contract(format!(
                "index {bad} out of range for axis of extent {}",
                shape[axis]
            )));
        }
        if indices.is_empty() {
            return Err(Error::shape("index_select with no indices"));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let s = (o * extent + i) * inner;
                data.extend_from_slice(&src[s..s + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        let t = Tensor::new(&out_shape, data)?;
        self.push(
            t,
            Op::IndexSelect {
                x,
                axis,
                indices: indices.to_vec(),
            },
        )
    }

    /// Row lookup into a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        if self.shape(table).len() != 2 {
            return Err(Error::shape("embedding table must be rank 2"));
        }
        self.index_select(table, 0, ids)
    }

    /// `z · sigmoid(z)`.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&z| z * sigmoid(z)).collect();
        let t = Tensor::new(xv.shape(), data)?;
        self.push(t, Op::Silu(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("softmax axis {axis} of {shape:?}")));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut y = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |e: usize| (o * extent + e) * inner + i;
                let max = (0..extent).map(|e| src[at(e)]).fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for e in 0..extent {
                    let v = (src[at(e)] - max).exp();
                    y[at(e)] = v;
                    sum = sum + v;
                }
                for e in 0..extent {
                    y[at(e)] = y[at(e)] / sum;
                }
            }
        }
        let t = Tensor::new(&shape, y)?;
        self.push(t, Op::Softmax { x, axis })
    }

    /// Normalises over the last axis, then applies `gain` (and `bias`, if given).
    ///
    /// Statistics are accumulated in f64 regardless of the element type.
    pub fn norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Option<Var>,
        kind: NormKind,
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("norm on a scalar"))?;
        if self.shape(gain) != [d] || bias.is_some_and(|b| self.shape(b) != [d]) {
            return Err(Error::shape(format!("norm affine params for width {d}")));
        }
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let bv = bias.map(|b| self.value(b).data());
        let mut y = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(xv.len() / d);
        for row in xv.chunks(d) {
            let (mean, var) = match kind {
                NormKind::Layer => {
                    let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
                    let var = row
                        .iter()
                        .map(|v| (v.as_f64() - mean).powi(2))
                        .sum::<f64>()
                        / d as f64;
                    (mean, var)
                }
                NormKind::Rms => (
                    0.0,
                    row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>() / d as f64,
                ),
            };
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for j in 0..d {
                let mut v = (row[j].as_f64() - mean) * r * gv[j].as_f64();
                if let Some(b) = bv {
                    v += b[j].as_f64();
                }
                y.push(T::of_f64(v));
            }
        }
        let t = Tensor::new(&shape, y)?;
        self.push(
            t,
            Op::Norm {
                x,
                gain,
                bias,
                kind,
                rstd,
            },
        )
    }

    /// Rotary position embedding over `[.., t, d]` with one position per row of the `t` axis.
    ///
    /// Feature pairs `(2i, 2i+1)` rotate by `pos · base^(-2i/d)`.
    pub fn rope(&mut self, x: Var, positions: &[usize], base: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("rope needs rank >= 2"));
        }
        let d = shape[shape.len() - 1];
        let t = shape[shape.len() - 2];
        if !d.is_multiple_of(2) {
            return Err(Error::config(format!("rope needs an even head width, got {d}")));
        }
        if positions.len() != t {
            return Err(Error::shape(format!(
                "rope: {} positions for {t} rows",
                positions.len()
            )));
        }
        let half = d / 2;
        let mut cos = Vec::with_capacity(t * half);
        let mut sin = Vec::with_capacity(t * half);
        for &p in positions {
            for i in 0..half {
                let angle = p as f64 * base.powf(-2.0 * i as f64 / d as f64);
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        let src = self.value(x).data();
        let mut y = vec![T::zero(); src.len()];
        rotate(src, &mut y, t, d, &cos, &sin, false);
        let out = Tensor::new(&shape, y)?;
        self.push(out, Op::Rope { x, cos, sin })
    }

    /// Masks `[.., tq, tk]` scores so query `i` only sees keys `j <= i + offset`.
    pub fn causal_mask(&mut self, x: Var, offset: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("causal_mask needs rank >= 2"));
        }
        let tk = shape[shape.len() - 1];
        let tq = shape[shape.len() - 2];
        let mut data = self.value(x).data().to_vec();
        for (r, row) in data.chunks_mut(tk).enumerate() {
            let i = r % tq;
            for v in row.iter_mut().skip(i + offset + 1) {
                *v = T::mask_value();
            }
        }
        let t = Tensor::new(&shape, data)?;
        self.push(t, Op::CausalMask { x, offset })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(Error::shape("mean of an empty tensor"));
        }
        let s: T = v.data().iter().copied().sum();
        let m = s / T::of_f64(v.len() as f64);
        self.push(Tensor::scalar(m), Op::Mean(x))
    }

    /// Mean negative log-likelihood of `targets` under softmax of the last axis.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let v = *shape.last().ok_or_else(|| Error::shape("cross_entropy on a scalar"))?;
        let rows = numel(&shape) / v;
        if rows != targets.len() || rows == 0 {
            return Err(Error::shape(format!(
                "cross_entropy: {} targets for logits {shape:?}",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::contract(format!("target {bad} out of vocab {v}")));
        }
        let src = self.value(logits).data();
        let mut probs = Vec::with_capacity(src.len());
        let mut total = 0.0f64;
        for (row, &t) in src.chunks(v).zip(targets) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max).as_f64();
            let sum: f64 = row.iter().map(|x| (x.as_f64() - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[t].as_f64();
            probs.extend(row.iter().map(|x| T::of_f64((x.as_f64() - lse).exp())));
        }
        let loss = T::of_f64(total / rows as f64);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }
}
