use super::{inverse_perm, permute_data, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::linalg::gemm;
use crate::par;
use crate::tensor::Scalar;

type Contribs<T> = Vec<(Var, Vec<T>)>;

impl<T: Scalar> Graph<T> {
    /// Back-propagates from a scalar `loss`, accumulating into node gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.status()?;
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        self.accumulate(loss, vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contribs = self.rule(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, cg) in contribs {
                self.accumulate(v, cg);
            }
        }
        Ok(())
    }

    /// Clears every gradient buffer on the tape.
    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.grad = None);
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        let node = &mut self.nodes[v.0];
        debug_assert_eq!(node.value.len(), g.len(), "gradient size for {}", node.op.name());
        match &mut node.grad {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            None => node.grad = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn rule(&self, i: usize, g: &[T]) -> Contribs<T> {
        let mut out: Contribs<T> = Vec::new();
        let mut push = |v: Var, f: &dyn Fn() -> Vec<T>| {
            if self.needs(v) {
                out.push((v, f()));
            }
        };
        let y = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, rows, inner, cols } => {
                push(a, &|| {
                    let mut ga = vec![T::zero(); rows * inner];
                    gemm(false, true, rows, inner, cols, g, self.value(b), false, &mut ga);
                    ga
                });
                push(b, &|| {
                    let mut gb = vec![T::zero(); inner * cols];
                    gemm(true, false, inner, cols, rows, self.value(a), g, false, &mut gb);
                    gb
                });
            }
            &Op::Bmm { a, b, ta, tb, batch, m, k, n } => {
                let (av, bv) = (self.value(a), self.value(b));
                push(a, &|| {
                    let mut ga = vec![T::zero(); batch * m * k];
                    par::for_each_chunk(&mut ga, m * k, |bi, blk| {
                        let gc = &g[bi * m * n..][..m * n];
                        let bb = &bv[bi * k * n..][..k * n];
                        match (ta, tb) {
                            // A [m,k]: dA = dC op(B)^T
                            (false, false) => gemm(false, true, m, k, n, gc, bb, false, blk),
                            (false, true) => gemm(false, false, m, k, n, gc, bb, false, blk),
                            // A stored [k,m]: dA = op(B) dC^T
                            (true, false) => gemm(false, true, k, m, n, bb, gc, false, blk),
                            (true, true) => gemm(true, true, k, m, n, bb, gc, false, blk),
                        }
                    });
                    ga
                });
                push(b, &|| {
                    let mut gb = vec![T::zero(); batch * k * n];
                    par::for_each_chunk(&mut gb, k * n, |bi, blk| {
                        let gc = &g[bi * m * n..][..m * n];
                        let aa = &av[bi * m * k..][..m * k];
                        match (ta, tb) {
                            // B [k,n]: dB = op(A)^T dC
                            (false, false) => gemm(true, false, k, n, m, aa, gc, false, blk),
                            (true, false) => gemm(false, false, k, n, m, aa, gc, false, blk),
                            // B stored [n,k]: dB = dC^T op(A)
                            (false, true) => gemm(true, false, n, k, m, gc, aa, false, blk),
                            (true, true) => gemm(true, true, n, k, m, gc, aa, false, blk),
                        }
                    });
                    gb
                });
            }
            &Op::Add(a, b) => {
                push(a, &|| g.to_vec());
                push(b, &|| g.to_vec());
            }
            &Op::Sub(a, b) => {
                push(a, &|| g.to_vec());
                push(b, &|| g.iter().map(|&v| -v).collect());
            }
            &Op::Mul(a, b) => {
                push(a, &|| zip(g, self.value(b), |x, y| x * y));
                push(b, &|| zip(g, self.value(a), |x, y| x * y));
            }
            &Op::AddBias { a, bias } => {
                push(a, &|| g.to_vec());
                push(bias, &|| {
                    let n = self.value(bias).len();
                    let mut gb = vec![T::zero(); n];
                    for row in g.chunks_exact(n) {
                        gb.iter_mut().zip(row).for_each(|(s, &v)| *s += v);
                    }
                    gb
                });
            }
            &Op::Scale(a, c) => push(a, &|| g.iter().map(|&v| v * c).collect()),
            &Op::Relu(a) => push(a, &|| {
                zip(g, self.value(a), |gv, x| if x > T::zero() { gv } else { T::zero() })
            }),
            &Op::Sigmoid(a) => push(a, &|| zip(g, y, |gv, s| gv * s * (T::one() - s))),
            &Op::Tanh(a) => push(a, &|| zip(g, y, |gv, t| gv * (T::one() - t * t))),
            &Op::Softmax { a, cols } => push(a, &|| {
                let mut gx = vec![T::zero(); y.len()];
                kernels::softmax_rows_backward(cols, y, g, &mut gx);
                gx
            }),
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let d = inv_std.len();
                let rows = xhat.len() / d;
                let mut sum_g = vec![T::zero(); d];
                let mut sum_gx = vec![T::zero(); d];
                for (gr, xr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for c in 0..d {
                        sum_g[c] += gr[c];
                        sum_gx[c] += gr[c] * xr[c];
                    }
                }
                push(*gamma, &|| sum_gx.clone());
                push(*beta, &|| sum_g.clone());
                let gam = self.value(*gamma);
                push(*x, &|| {
                    let mut gx = vec![T::zero(); g.len()];
                    if *train {
                        let n = T::from_usize_lossy(rows);
                        let k: Vec<T> = (0..d).map(|c| gam[c] * inv_std[c] / n).collect();
                        par::for_each_chunk(&mut gx, d, |r, row| {
                            let (gr, xr) = (&g[r * d..][..d], &xhat[r * d..][..d]);
                            for c in 0..d {
                                row[c] = k[c] * (n * gr[c] - sum_g[c] - xr[c] * sum_gx[c]);
                            }
                        });
                    } else {
                        let k: Vec<T> = (0..d).map(|c| gam[c] * inv_std[c]).collect();
                        par::for_each_chunk(&mut gx, d, |r, row| {
                            let gr = &g[r * d..][..d];
                            for c in 0..d {
                                row[c] = gr[c] * k[c];
                            }
                        });
                    }
                    gx
                });
            }
            &Op::Reshape(a) => push(a, &|| g.to_vec()),
            Op::Permute { a, perm } => push(*a, &|| {
                permute_data(g, &self.nodes[i].shape, &inverse_perm(perm))
            }),
            &Op::PixelPack { a, batch, h, w, d, s } => push(a, &|| {
                kernels::pixel_unpack(batch, h, w, d, s, g).expect("validated on forward")
            }),
            &Op::Upsample { a, h, w, d, s } => push(a, &|| {
                let mut ga = vec![T::zero(); self.value(a).len()];
                kernels::upsample_cells_backward(h, w, d, s, g, &mut ga);
                ga
            }),
            &Op::BroadcastRows { a, count } => push(a, &|| {
                let d = *self.shape(a).last().unwrap();
                let mut ga = vec![T::zero(); self.value(a).len()];
                for (r, row) in g.chunks_exact(d).enumerate() {
                    let b = r / count;
                    ga[b * d..(b + 1) * d].iter_mut().zip(row).for_each(|(s, &v)| *s += v);
                }
                ga
            }),
            &Op::DyConv { x, w, geom } => {
                push(x, &|| {
                    let mut gx = vec![T::zero(); geom.feature_len()];
                    kernels::dyconv_backward_input(geom, g, self.value(w), &mut gx);
                    gx
                });
                push(w, &|| {
                    let mut gw = vec![T::zero(); geom.kernel_len()];
                    kernels::dyconv_backward_kernels(geom, g, self.value(x), &mut gw);
                    gw
                });
            }
            Op::MaxPool { a, argmax } => push(*a, &|| {
                let mut ga = vec![T::zero(); self.value(*a).len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    ga[src as usize] += gv;
                }
                ga
            }),
            Op::Embedding { table, ids } => push(*table, &|| {
                let e = self.shape(*table)[1];
                let mut gt = vec![T::zero(); self.value(*table).len()];
                for (r, &id) in ids.iter().enumerate() {
                    gt[id * e..(id + 1) * e]
                        .iter_mut()
                        .zip(&g[r * e..(r + 1) * e])
                        .for_each(|(s, &v)| *s += v);
                }
                gt
            }),
            Op::Stack { parts } => {
                let [b, l, d] = [self.nodes[i].shape[0], parts.len(), self.nodes[i].shape[2]];
                for (t, &p) in parts.iter().enumerate() {
                    push(p, &|| {
                        let mut gp = vec![T::zero(); b * d];
                        for bi in 0..b {
                            gp[bi * d..(bi + 1) * d].copy_from_slice(&g[(bi * l + t) * d..][..d]);
                        }
                        gp
                    });
                }
            }
            Op::MaskedMean { a, mask, counts } => push(*a, &|| {
                let s = self.shape(*a);
                let (l, d) = (s[1], s[2]);
                let mut ga = vec![T::zero(); self.value(*a).len()];
                for (r, row) in ga.chunks_mut(d).enumerate() {
                    if mask[r] {
                        let b = r / l;
                        let c = T::from_usize_lossy(counts[b]);
                        row.iter_mut().zip(&g[b * d..(b + 1) * d]).for_each(|(o, &v)| *o = v / c);
                    }
                }
                ga
            }),
            Op::MaskRows { a, mask } => push(*a, &|| {
                let d = *self.shape(*a).last().unwrap();
                let mut ga = g.to_vec();
                for (row, &keep) in ga.chunks_mut(d).zip(mask) {
                    if !keep {
                        row.iter_mut().for_each(|v| *v = T::zero());
                    }
                }
                ga
            }),
            &Op::Sum(a) => push(a, &|| vec![g[0]; self.value(a).len()]),
            Op::CrossEntropy { logits, targets, probs } => push(*logits, &|| {
                let b = targets.len();
                let n = probs.len() / b;
                let k = g[0] / T::from_usize_lossy(b);
                let mut gl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * n + t] -= T::one();
                }
                gl.iter_mut().for_each(|v| *v *= k);
                gl
            }),
        }
        out
    }
}

fn zip<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T + Sync + Send) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    par::zip_into(a, b, &mut out, |&x, &y| f(x, y));
    out
}
