//! Reverse-mode differentiation over the handful of tensor ops the U-Net
//! uses. The tape records every op with its inputs; `backward` replays it in
//! reverse and returns gradients for the parameter leaves.
//!
//! Activation layout is `[B, C, L, F]`: batch, channels, time, latent
//! features. Time convolutions act on `(C, L)` independently for every `F`;
//! linear maps act on the trailing `F` axis.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{axpy, dot, matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Var(usize);

enum Value<T> {
    Param(usize),
    Owned(Tensor<T>),
}

#[derive(Clone, Copy)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Conv { x: Var, w: Var, b: Var, stride: usize, pad_left: usize },
    Upsample { x: Var },
    LayerNorm { x: Var, g: Var, b: Var },
    Silu { x: Var },
    Add { a: Var, b: Var },
    AddEmbedding { x: Var, e: Var },
    Concat { a: Var, b: Var },
}

struct Node<T> {
    value: Value<T>,
    op: Op,
}

pub(crate) struct Tape<'p, T> {
    params: &'p [Tensor<T>],
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub(crate) fn new(params: &'p [Tensor<T>]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            check_finite: true,
        }
    }

    pub(crate) fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Param(i) => &self.params[*i],
            Value::Owned(t) => t,
        }
    }

    pub(crate) fn param(&mut self, index: usize) -> Var {
        self.nodes.push(Node {
            value: Value::Param(index),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, t: Tensor<T>, op: Op, label: &str) -> Result<Var> {
        if self.check_finite && !t.is_finite() {
            return Err(Error::NonFinite(label.to_string()));
        }
        self.nodes.push(Node {
            value: Value::Owned(t),
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `y = x·W + b` over the trailing axis; `W` is `[F_in, F_out]`.
    pub(crate) fn linear(&mut self, x: Var, w: Var, b: Var, label: &str) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (fin, fout) = (wv.shape()[0], wv.shape()[1]);
        let xs = xv.shape();
        if xs.last() != Some(&fin) || bv.len() != fout {
            return Err(Error::shape(format!(
                "{label}: input {:?} vs weight {:?}",
                xs,
                wv.shape()
            )));
        }
        let m = xv.len() / fin;
        let mut out = Vec::with_capacity(m * fout);
        for _ in 0..m {
            out.extend_from_slice(bv.data());
        }
        matmul_acc(xv.data(), wv.data(), &mut out, m, fin, fout);
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = fout;
        let t = Tensor::from_vec(&shape, out)?;
        self.push(t, Op::Linear { x, w, b }, label)
    }

    /// Convolution along time. `W` is `[C_out, C_in, K]`, zero padding of
    /// `pad_left` before the sequence, output length `out_len`.
    pub(crate) fn conv(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad_left: usize,
        out_len: usize,
        label: &str,
    ) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let xs = xv.shape();
        let ws = wv.shape();
        if xs.len() != 4 || ws.len() != 3 || xs[1] != ws[1] || bv.len() != ws[0] {
            return Err(Error::shape(format!("{label}: input {:?} vs kernel {:?}", xs, ws)));
        }
        let (nb, cin, lin, f) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);
        let mut out = vec![T::zero(); nb * cout * out_len * f];
        let xd = xv.data();
        let wd = wv.data();
        for bi in 0..nb {
            for co in 0..cout {
                for lo in 0..out_len {
                    let o = ((bi * cout + co) * out_len + lo) * f;
                    let yrow = &mut out[o..o + f];
                    yrow.iter_mut().for_each(|v| *v = bv.data()[co]);
                    for ci in 0..cin {
                        for kk in 0..k {
                            let li = (lo * stride + kk) as isize - pad_left as isize;
                            if li < 0 || li as usize >= lin {
                                continue;
                            }
                            let xo = ((bi * cin + ci) * lin + li as usize) * f;
                            axpy(wd[(co * cin + ci) * k + kk], &xd[xo..xo + f], yrow);
                        }
                    }
                }
            }
        }
        let t = Tensor::from_vec(&[nb, cout, out_len, f], out)?;
        self.push(t, Op::Conv { x, w, b, stride, pad_left }, label)
    }

    /// Nearest-neighbour stretch of the time axis to `out_len`.
    pub(crate) fn upsample(&mut self, x: Var, out_len: usize, label: &str) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        let (nb, c, lin, f) = (s[0], s[1], s[2], s[3]);
        let mut out = Vec::with_capacity(nb * c * out_len * f);
        for bc in 0..nb * c {
            for l in 0..out_len {
                let src = l * lin / out_len;
                let o = (bc * lin + src) * f;
                out.extend_from_slice(&xv.data()[o..o + f]);
            }
        }
        let t = Tensor::from_vec(&[nb, c, out_len, f], out)?;
        self.push(t, Op::Upsample { x }, label)
    }

    /// Layer normalisation over the trailing axis with gain and shift.
    pub(crate) fn layer_norm(&mut self, x: Var, g: Var, b: Var, label: &str) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(g), self.value(b));
        let f = gv.len();
        if xv.shape().last() != Some(&f) {
            return Err(Error::shape(format!("{label}: {:?} vs gain {f}", xv.shape())));
        }
        let eps = T::of(LN_EPS);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(f) {
            let (mean, rstd) = moments(row, eps);
            for j in 0..f {
                out.push((row[j] - mean) * rstd * gv.data()[j] + bv.data()[j]);
            }
        }
        let t = Tensor::from_vec(xv.shape(), out)?;
        self.push(t, Op::LayerNorm { x, g, b }, label)
    }

    pub(crate) fn silu(&mut self, x: Var, label: &str) -> Result<Var> {
        let t = self.value(x).map(|v| v * sigmoid(v));
        self.push(t, Op::Silu { x }, label)
    }

    pub(crate) fn add(&mut self, a: Var, b: Var, label: &str) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        self.push(t, Op::Add { a, b }, label)
    }

    /// Adds a `[B, F]` embedding to every `(C, L)` position of `[B, C, L, F]`.
    pub(crate) fn add_embedding(&mut self, x: Var, e: Var, label: &str) -> Result<Var> {
        let (xv, ev) = (self.value(x), self.value(e));
        let s = xv.shape();
        let f = s[3];
        if ev.shape() != [s[0], f] {
            return Err(Error::shape(format!("{label}: {:?} vs embedding {:?}", s, ev.shape())));
        }
        let per = s[1] * s[2];
        let mut out = xv.data().to_vec();
        for bi in 0..s[0] {
            let erow = &ev.data()[bi * f..(bi + 1) * f];
            for r in 0..per {
                let o = (bi * per + r) * f;
                for (y, &e) in out[o..o + f].iter_mut().zip(erow) {
                    *y += e;
                }
            }
        }
        let t = Tensor::from_vec(s, out)?;
        self.push(t, Op::AddEmbedding { x, e }, label)
    }

    /// Concatenates along the channel axis.
    pub(crate) fn concat(&mut self, a: Var, b: Var, label: &str) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
            return Err(Error::shape(format!("{label}: {:?} vs {:?}", sa, sb)));
        }
        let (ra, rb) = (av.row_len(), bv.row_len());
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for bi in 0..sa[0] {
            out.extend_from_slice(&av.data()[bi * ra..(bi + 1) * ra]);
            out.extend_from_slice(&bv.data()[bi * rb..(bi + 1) * rb]);
        }
        let t = Tensor::from_vec(&[sa[0], sa[1] + sb[1], sa[2], sa[3]], out)?;
        self.push(t, Op::Concat { a, b }, label)
    }

    /// Propagates `grad` from `output` back to every parameter leaf. Entry
    /// `i` of the result is the gradient of parameter `i` (zeros if the
    /// parameter did not take part).
    pub(crate) fn backward(&self, output: Var, grad: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        if grad.shape() != self.value(output).shape() {
            return Err(Error::shape(format!(
                "output gradient {:?} vs output {:?}",
                grad.shape(),
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(grad.clone());
        let mut param_grads: Vec<Tensor<T>> = self.params.iter().map(|p| Tensor::zeros(p.shape())).collect();

        for idx in (0..=output.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            match self.nodes[idx].op {
                Op::Leaf => {
                    if let Value::Param(p) = self.nodes[idx].value {
                        param_grads[p].add_assign(&dy)?;
                    }
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(x), self.value(w));
                    let (fin, fout) = (wv.shape()[0], wv.shape()[1]);
                    let m = xv.len() / fin;
                    let mut dx = vec![T::zero(); xv.len()];
                    matmul_bt_acc(dy.data(), wv.data(), &mut dx, m, fin, fout);
                    let mut dw = vec![T::zero(); wv.len()];
                    matmul_at_acc(xv.data(), dy.data(), &mut dw, m, fin, fout);
                    let mut db = vec![T::zero(); fout];
                    for row in dy.data().chunks(fout) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    accumulate(&mut grads, x, Tensor::from_vec(xv.shape(), dx)?)?;
                    accumulate(&mut grads, w, Tensor::from_vec(wv.shape(), dw)?)?;
                    accumulate(&mut grads, b, Tensor::from_vec(&[fout], db)?)?;
                }
                Op::Conv { x, w, b, stride, pad_left } => {
                    let (xv, wv) = (self.value(x), self.value(w));
                    let xs = xv.shape();
                    let (nb, cin, lin, f) = (xs[0], xs[1], xs[2], xs[3]);
                    let (cout, k) = (wv.shape()[0], wv.shape()[2]);
                    let out_len = dy.shape()[2];
                    let mut dx = vec![T::zero(); xv.len()];
                    let mut dw = vec![T::zero(); wv.len()];
                    let mut db = vec![T::zero(); cout];
                    let (xd, wd, dyd) = (xv.data(), wv.data(), dy.data());
                    for bi in 0..nb {
                        for co in 0..cout {
                            for lo in 0..out_len {
                                let o = ((bi * cout + co) * out_len + lo) * f;
                                let dyrow = &dyd[o..o + f];
                                db[co] += dyrow.iter().copied().sum();
                                for ci in 0..cin {
                                    for kk in 0..k {
                                        let li = (lo * stride + kk) as isize - pad_left as isize;
                                        if li < 0 || li as usize >= lin {
                                            continue;
                                        }
                                        let xo = ((bi * cin + ci) * lin + li as usize) * f;
                                        let wi = (co * cin + ci) * k + kk;
                                        dw[wi] += dot(&xd[xo..xo + f], dyrow);
                                        axpy(wd[wi], dyrow, &mut dx[xo..xo + f]);
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, x, Tensor::from_vec(xs, dx)?)?;
                    accumulate(&mut grads, w, Tensor::from_vec(wv.shape(), dw)?)?;
                    accumulate(&mut grads, b, Tensor::from_vec(&[cout], db)?)?;
                }
                Op::Upsample { x } => {
                    let xs = self.value(x).shape().to_vec();
                    let (nb, c, lin, f) = (xs[0], xs[1], xs[2], xs[3]);
                    let out_len = dy.shape()[2];
                    let mut dx = vec![T::zero(); nb * c * lin * f];
                    for bc in 0..nb * c {
                        for l in 0..out_len {
                            let src = l * lin / out_len;
                            let o = (bc * out_len + l) * f;
                            let xo = (bc * lin + src) * f;
                            for (d, &g) in dx[xo..xo + f].iter_mut().zip(&dy.data()[o..o + f]) {
                                *d += g;
                            }
                        }
                    }
                    accumulate(&mut grads, x, Tensor::from_vec(&xs, dx)?)?;
                }
                Op::LayerNorm { x, g, b } => {
                    let (xv, gv) = (self.value(x), self.value(g));
                    let f = gv.len();
                    let eps = T::of(LN_EPS);
                    let inv_f = T::one() / T::of(f as f64);
                    let mut dx = Vec::with_capacity(xv.len());
                    let mut dg = vec![T::zero(); f];
                    let mut dbeta = vec![T::zero(); f];
                    let mut xhat = vec![T::zero(); f];
                    let mut dxhat = vec![T::zero(); f];
                    for (row, dyrow) in xv.data().chunks(f).zip(dy.data().chunks(f)) {
                        let (mean, rstd) = moments(row, eps);
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..f {
                            xhat[j] = (row[j] - mean) * rstd;
                            dxhat[j] = dyrow[j] * gv.data()[j];
                            dg[j] += dyrow[j] * xhat[j];
                            dbeta[j] += dyrow[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xhat[j];
                        }
                        m1 *= inv_f;
                        m2 *= inv_f;
                        for j in 0..f {
                            dx.push(rstd * (dxhat[j] - m1 - xhat[j] * m2));
                        }
                    }
                    accumulate(&mut grads, x, Tensor::from_vec(xv.shape(), dx)?)?;
                    accumulate(&mut grads, g, Tensor::from_vec(&[f], dg)?)?;
                    accumulate(&mut grads, b, Tensor::from_vec(&[f], dbeta)?)?;
                }
                Op::Silu { x } => {
                    let dx = self.value(x).zip_map(&dy, |v, g| {
                        let s = sigmoid(v);
                        g * s * (T::one() + v * (T::one() - s))
                    })?;
                    accumulate(&mut grads, x, dx)?;
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, a, dy.clone())?;
                    accumulate(&mut grads, b, dy)?;
                }
                Op::AddEmbedding { x, e } => {
                    let s = dy.shape().to_vec();
                    let f = s[3];
                    let per = s[1] * s[2];
                    let mut de = vec![T::zero(); s[0] * f];
                    for bi in 0..s[0] {
                        let erow = &mut de[bi * f..(bi + 1) * f];
                        for r in 0..per {
                            let o = (bi * per + r) * f;
                            for (d, &g) in erow.iter_mut().zip(&dy.data()[o..o + f]) {
                                *d += g;
                            }
                        }
                    }
                    accumulate(&mut grads, e, Tensor::from_vec(&[s[0], f], de)?)?;
                    accumulate(&mut grads, x, dy)?;
                }
                Op::Concat { a, b } => {
                    let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
                    let (ra, rb) = (self.value(a).row_len(), self.value(b).row_len());
                    let mut da = Vec::with_capacity(sa.iter().product());
                    let mut dbv = Vec::with_capacity(sb.iter().product());
                    for row in dy.data().chunks(ra + rb) {
                        da.extend_from_slice(&row[..ra]);
                        dbv.extend_from_slice(&row[ra..]);
                    }
                    accumulate(&mut grads, a, Tensor::from_vec(&sa, da)?)?;
                    accumulate(&mut grads, b, Tensor::from_vec(&sb, dbv)?)?;
                }
            }
        }
        Ok(param_grads)
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

#[inline]
fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

fn moments<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = T::of(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + eps).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type Build = fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>;

    /// Central-difference check of every parameter through a single op.
    fn check(params: Vec<Tensor<f64>>, build: Build) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let eval = |ps: &[Tensor<f64>]| -> (Tensor<f64>, Vec<Tensor<f64>>, f64) {
            let mut tape = Tape::new(ps);
            let vars: Vec<Var> = (0..ps.len()).map(|i| tape.param(i)).collect();
            let out = build(&mut tape, &vars).unwrap();
            let o = tape.value(out).clone();
            // fixed pseudo-random weighting of outputs
            let r: Vec<f64> = (0..o.len()).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect();
            let loss = o.data().iter().zip(&r).map(|(a, b)| a * b).sum();
            let g = tape.backward(out, &Tensor::from_vec(o.shape(), r).unwrap()).unwrap();
            (o, g, loss)
        };
        let params: Vec<Tensor<f64>> = params
            .into_iter()
            .map(|p| Tensor::randn(p.shape(), &mut rng))
            .collect();
        let (_, grads, _) = eval(&params);
        let h = 1e-6;
        for (pi, p) in params.iter().enumerate() {
            for j in 0..p.len() {
                let mut plus = params.clone();
                plus[pi].data_mut()[j] += h;
                let mut minus = params.clone();
                minus[pi].data_mut()[j] -= h;
                let fd = (eval(&plus).2 - eval(&minus).2) / (2.0 * h);
                let an = grads[pi].data()[j];
                assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "param {pi}[{j}]: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn linear_gradients() {
        check(
            vec![Tensor::zeros(&[2, 1, 3, 4]), Tensor::zeros(&[4, 5]), Tensor::zeros(&[5])],
            |t, v| t.linear(v[0], v[1], v[2], "lin"),
        );
    }

    #[test]
    fn strided_conv_gradients() {
        check(
            vec![Tensor::zeros(&[2, 2, 10, 3]), Tensor::zeros(&[3, 2, 4]), Tensor::zeros(&[3])],
            |t, v| t.conv(v[0], v[1], v[2], 4, 1, 3, "down"),
        );
        check(
            vec![Tensor::zeros(&[1, 2, 5, 2]), Tensor::zeros(&[2, 2, 3]), Tensor::zeros(&[2])],
            |t, v| t.conv(v[0], v[1], v[2], 1, 1, 5, "same"),
        );
    }

    #[test]
    fn layer_norm_and_silu_gradients() {
        check(
            vec![Tensor::zeros(&[2, 1, 3, 5]), Tensor::zeros(&[5]), Tensor::zeros(&[5])],
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], "ln")?;
                t.silu(y, "act")
            },
        );
    }

    #[test]
    fn structural_op_gradients() {
        check(
            vec![Tensor::zeros(&[2, 1, 3, 2]), Tensor::zeros(&[2, 2, 10, 2]), Tensor::zeros(&[2, 2])],
            |t, v| {
                let up = t.upsample(v[0], 10, "up")?;
                let up = t.add_embedding(up, v[2], "emb")?;
                let cat = t.concat(up, v[1], "cat")?;
                let sq = t.silu(cat, "act")?;
                t.add(sq, cat, "res")
            },
        );
    }

    #[test]
    fn conv_matches_direct_sum() {
        // 1 channel, kernel [1, 2, 3] centred: y[l] = x[l-1] + 2x[l] + 3x[l+1]
        let x = Tensor::from_vec(&[1, 1, 4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::from_vec(&[1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = Tensor::from_vec(&[1], vec![0.5]).unwrap();
        let params = [x, w, b];
        let mut tape = Tape::new(&params);
        let (xv, wv, bv) = (tape.param(0), tape.param(1), tape.param(2));
        let y = tape.conv(xv, wv, bv, 1, 1, 4, "c").unwrap();
        assert_eq!(tape.value(y).data(), &[8.5, 14.5, 20.5, 11.5]);
    }

    #[test]
    fn non_finite_activation_names_layer() {
        let params = [Tensor::from_vec(&[1, 1, 1, 2], vec![f64::INFINITY, 0.0]).unwrap()];
        let mut tape = Tape::new(&params);
        let x = tape.param(0);
        match tape.silu(x, "block.act") {
            Err(Error::NonFinite(l)) => assert_eq!(l, "block.act"),
            other => panic!("{:?}", other.map(|_| ())),
        }
    }
}
