//! Language-guided dynamic convolution.
//!
//! For an image feature map `X: [h, w, d]` and text features `Y: [l, d_t]`:
//!
//! 1. pack every `s x s` block of `X` into one token (`n = hw / s^2` tokens of width `s^2 d`);
//! 2. attend from tokens to words, `A = softmax((X_p W_X)(Y W_Y)^T / sqrt(d / H))` per head,
//!    with padded words excluded;
//! 3. form the packed condition matrix `C_p = relu(A (Y W_A) W_C)`, heads concatenated
//!    before `W_C`;
//! 4. replicate each row of `C_p` over its `s x s` cell to get `C: [hw, d]`;
//! 5. predict per-position kernels `W = C W_1 + b_1`, viewed as `[h, w, k, k, g]`;
//! 6. convolve depth-wise: channel `c` of group `c / (d/g)` at `(i, j)` is filtered by
//!    `W[i, j, :, :, group]`, zero padded, stride 1.
//!
//! A [`LaConvBlock`] wraps this as `X' = relu(BN(f(X)) + X)` followed by a
//! residual 4x MLP, `X_out = BN(relu(BN(X' W_in)) W_out) + X'`.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::kernels;
use crate::params::{add_batch_norm, init, ParamKind, ParamStore, Session};
use crate::tensor::{Scalar, Tensor};
use crate::text::{merge_heads, split_heads, TextVars};

/// How the condition matrix is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generation {
    /// Cross-modal attention between image tokens and words.
    #[default]
    Conditioned,
    /// Ablation: one condition vector from the pooled text, shared by all positions.
    LanguageOnly,
}

/// Hyper-parameters of a single LaConv layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaConvSpec {
    pub dim: usize,
    pub text_dim: usize,
    pub kernel: usize,
    pub groups: usize,
    pub packing: usize,
    pub heads: usize,
    pub generation: Generation,
}

impl LaConvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 {
            return Err(Error::config(format!("kernel size must be odd, got {}", self.kernel)));
        }
        if self.groups == 0 || self.dim % self.groups != 0 {
            return Err(Error::config(format!(
                "dim {} not divisible by groups {}",
                self.dim, self.groups
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.packing == 0 {
            return Err(Error::config("packing size must be positive"));
        }
        Ok(())
    }

    /// Width of one kernel-head output row: `k * k * g`.
    pub fn kernel_width(&self) -> usize {
        self.kernel * self.kernel * self.groups
    }
}

/// The generator and convolution of one LaConv layer. Parameters live under `prefix`.
#[derive(Clone, Debug)]
pub struct LaConvLayer {
    pub spec: LaConvSpec,
    prefix: String,
}

impl LaConvLayer {
    pub fn new(prefix: impl Into<String>, spec: LaConvSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec, prefix: prefix.into() })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn name(&self, t: &str) -> String {
        format!("{}.{t}", self.prefix)
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        let LaConvSpec { dim: d, text_dim: dt, packing: s, .. } = self.spec;
        let kw = self.spec.kernel_width();
        if self.spec.generation == Generation::Conditioned {
            store.insert(self.name("w_x"), ParamKind::Trainable, init::fan_in(&[s * s * d, d], s * s * d, rng))?;
            store.insert(self.name("w_y"), ParamKind::Trainable, init::fan_in(&[dt, d], dt, rng))?;
        }
        store.insert(self.name("w_a"), ParamKind::Trainable, init::fan_in(&[dt, d], dt, rng))?;
        store.insert(self.name("w_c"), ParamKind::Trainable, init::fan_in(&[d, d], d, rng))?;
        store.insert(self.name("w_1"), ParamKind::Trainable, init::fan_in(&[d, kw], d, rng))?;
        store.insert(self.name("b_1"), ParamKind::Trainable, Tensor::zeros([kw]))?;
        Ok(())
    }

    /// Cross-modal affinity `[B*H, n, l]` between packed tokens `[B, n, s*s*d]` and words.
    pub fn affinity<T: Scalar>(&self, s: &mut Session<'_, T>, packed: Var, text: &TextVars) -> Result<Var> {
        let heads = self.spec.heads;
        let wx = s.param(&self.name("w_x"))?;
        let wy = s.param(&self.name("w_y"))?;
        let q = s.graph.matmul(packed, wx)?;
        let k = s.graph.matmul(text.features, wy)?;
        let q = split_heads(&mut s.graph, q, heads)?;
        let k = split_heads(&mut s.graph, k, heads)?;
        let logits = s.graph.bmm(q, k, false, true)?;
        let logits = s.graph.scale(logits, 1.0 / ((self.spec.dim / heads) as f64).sqrt());
        s.graph.softmax(logits, Some(&text.mask))
    }

    /// Packed condition matrix `relu(A (Y W_A) W_C)`: `[B, n, d]`.
    pub fn condition_matrix<T: Scalar>(&self, s: &mut Session<'_, T>, affinity: Var, text: &TextVars) -> Result<Var> {
        let wa = s.param(&self.name("w_a"))?;
        let wc = s.param(&self.name("w_c"))?;
        let v = s.graph.matmul(text.features, wa)?;
        let v = split_heads(&mut s.graph, v, self.spec.heads)?;
        let ctx = s.graph.bmm(affinity, v, false, false)?;
        let ctx = merge_heads(&mut s.graph, ctx, text.batch, self.spec.heads)?;
        let c = s.graph.matmul(ctx, wc)?;
        Ok(s.graph.relu(c))
    }

    /// Per-position kernels `[B, h, w, k, k, g]` from a recovered condition matrix `[B, h*w, d]`.
    pub fn generate_kernels<T: Scalar>(&self, s: &mut Session<'_, T>, condition: Var, h: usize, w: usize) -> Result<Var> {
        let w1 = s.param(&self.name("w_1"))?;
        let b1 = s.param(&self.name("b_1"))?;
        let phi = s.graph.matmul(condition, w1)?;
        let phi = s.graph.add_bias(phi, b1)?;
        let b = s.graph.shape(condition)[0];
        let k = self.spec.kernel;
        s.graph.reshape(phi, &[b, h, w, k, k, self.spec.groups])
    }

    /// `f(X; phi(X, Y))` for `x: [B, h, w, d]`; output has the same shape.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var, text: &TextVars) -> Result<Var> {
        let shape = s.graph.shape(x).to_vec();
        let [b, h, w, d] = match shape[..] {
            [b, h, w, d] => [b, h, w, d],
            _ => return Err(Error::shape(format!("LaConv expects [B, h, w, d], got {shape:?}"))),
        };
        if d != self.spec.dim || text.dim != self.spec.text_dim || text.batch != b {
            return Err(Error::shape(format!(
                "LaConv {} built for d={} text_dim={}, got features {shape:?} and text [{}, {}, {}]",
                self.prefix, self.spec.dim, self.spec.text_dim, text.batch, text.len, text.dim
            )));
        }
        let kernels = match self.spec.generation {
            Generation::Conditioned => {
                let sp = self.spec.packing;
                let packed = s.graph.pixel_pack(x, sp)?;
                let a = self.affinity(s, packed, text)?;
                let c_packed = self.condition_matrix(s, a, text)?;
                let c = s.graph.upsample_cells(c_packed, sp, h, w)?;
                s.capture(&self.prefix, "affinity", a);
                s.capture(&self.prefix, "condition", c);
                self.generate_kernels(s, c, h, w)?
            }
            Generation::LanguageOnly => {
                let wa = s.param(&self.name("w_a"))?;
                let wc = s.param(&self.name("w_c"))?;
                let w1 = s.param(&self.name("w_1"))?;
                let b1 = s.param(&self.name("b_1"))?;
                let v = s.graph.matmul(text.pooled, wa)?;
                let c = s.graph.matmul(v, wc)?;
                let c = s.graph.relu(c);
                let phi = s.graph.matmul(c, w1)?;
                let phi = s.graph.add_bias(phi, b1)?;
                let phi = s.graph.broadcast_rows(phi, h * w)?;
                let k = self.spec.kernel;
                s.capture(&self.prefix, "condition", c);
                s.graph.reshape(phi, &[b, h, w, k, k, self.spec.groups])?
            }
        };
        s.capture(&self.prefix, "kernels", kernels);
        s.graph.dyconv(x, kernels)
    }
}

/// Residual LaConv block with the 4x-expansion MLP.
#[derive(Clone, Debug)]
pub struct LaConvBlock {
    pub layer: LaConvLayer,
    prefix: String,
}

impl LaConvBlock {
    pub fn new(prefix: impl Into<String>, spec: LaConvSpec) -> Result<Self> {
        let prefix = prefix.into();
        Ok(Self { layer: LaConvLayer::new(prefix.clone(), spec)?, prefix })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn name(&self, t: &str) -> String {
        format!("{}.{t}", self.prefix)
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        let d = self.layer.spec.dim;
        self.layer.init(store, rng)?;
        add_batch_norm(store, &self.name("bn"), d)?;
        store.insert(self.name("mlp.w_in"), ParamKind::Trainable, init::fan_in(&[d, 4 * d], d, rng))?;
        add_batch_norm(store, &self.name("mlp.bn_in"), 4 * d)?;
        store.insert(self.name("mlp.w_out"), ParamKind::Trainable, init::fan_in(&[4 * d, d], 4 * d, rng))?;
        add_batch_norm(store, &self.name("mlp.bn_out"), d)?;
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var, text: &TextVars) -> Result<Var> {
        let f = self.layer.forward(s, x, text)?;
        let f = s.batch_norm(f, &self.name("bn"))?;
        let r = s.graph.add(f, x)?;
        let x1 = s.graph.relu(r);
        let mlp = self.mlp(s, x1)?;
        s.graph.add(mlp, x1)
    }

    /// `BN(relu(BN(x W_in)) W_out)`.
    pub fn mlp<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w_in = s.param(&self.name("mlp.w_in"))?;
        let w_out = s.param(&self.name("mlp.w_out"))?;
        let h = s.graph.matmul(x, w_in)?;
        let h = s.batch_norm(h, &self.name("mlp.bn_in"))?;
        let h = s.graph.relu(h);
        let o = s.graph.matmul(h, w_out)?;
        s.batch_norm(o, &self.name("mlp.bn_out"))
    }
}

/// Packs a single `[h, w, d]` map into `[(h/s)(w/s), s*s*d]` tokens.
pub fn pixel_pack<T: Scalar>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let [h, w, d] = hwd(x)?;
    let data = kernels::pixel_pack(1, h, w, d, s, x.data())?;
    Tensor::new([(h / s) * (w / s), s * s * d], data)
}

/// Exact inverse of [`pixel_pack`].
pub fn pixel_unpack<T: Scalar>(tokens: &Tensor<T>, s: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    kernels::check_packing(h, w, s)?;
    let n = (h / s) * (w / s);
    match tokens.shape() {
        &[tn, width] if tn == n && width % (s * s) == 0 => {
            let d = width / (s * s);
            Tensor::new([h, w, d], kernels::pixel_unpack(1, h, w, d, s, tokens.data())?)
        }
        other => Err(Error::shape(format!("{other:?} are not packed tokens of a {h}x{w} map with s={s}"))),
    }
}

/// Recovers a packed condition matrix `[(h/s)(w/s), d]` to `[h*w, d]` by
/// replicating each row over its `s x s` cell.
pub fn pixel_unpack_condition<T: Scalar>(packed: &Tensor<T>, s: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    kernels::check_packing(h, w, s)?;
    let n = (h / s) * (w / s);
    let d = match packed.shape() {
        &[tn, d] if tn == n => d,
        other => return Err(Error::shape(format!("{other:?} is not a packed [{n}, d] condition matrix"))),
    };
    let mut out = vec![T::zero(); h * w * d];
    kernels::upsample_cells(h, w, d, s, packed.data(), &mut out);
    Tensor::new([h * w, d], out)
}

/// Dynamic depth-wise convolution of one `[h, w, d]` map with `[h, w, k, k, g]` kernels.
pub fn dynamic_depthwise_conv<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let [h, wd, d] = hwd(x)?;
    let geom = match w.shape() {
        &[kh, kw, k, k2, g] if kh == h && kw == wd && k == k2 => kernels::ConvGeom {
            batch: 1,
            height: h,
            width: wd,
            channels: d,
            kernel: k,
            groups: g,
        },
        other => return Err(Error::shape(format!("kernels {other:?} do not fit a {h}x{wd} map"))),
    };
    geom.validate()?;
    let mut out = vec![T::zero(); x.len()];
    kernels::dyconv_forward(geom, x.data(), w.data(), &mut out);
    Tensor::new([h, wd, d], out)
}

fn hwd<T: Scalar>(x: &Tensor<T>) -> Result<[usize; 3]> {
    match x.shape() {
        &[h, w, d] => Ok([h, w, d]),
        other => Err(Error::shape(format!("expected an [h, w, d] feature map, got {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::params::ParamStore;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn spec(d: usize, k: usize, g: usize, s: usize) -> LaConvSpec {
        LaConvSpec { dim: d, text_dim: d, kernel: k, groups: g, packing: s, heads: 2, generation: Generation::Conditioned }
    }

    fn text(g: &mut crate::Graph<f64>, y: Tensor<f64>, mask: Vec<bool>) -> TextVars {
        let v = g.constant(y);
        TextVars::from_features(g, v, &mask).unwrap()
    }

    /// Naive loop: channel c at (i, j) sums x over the centred window with
    /// the kernel of group c / (d / g).
    fn naive_conv(h: usize, w: usize, d: usize, k: usize, g: usize, x: &[f64], ker: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; h * w * d];
        let r = (k / 2) as isize;
        for i in 0..h {
            for j in 0..w {
                for c in 0..d {
                    let grp = c / (d / g);
                    let mut acc = 0.0;
                    for a in 0..k {
                        for b in 0..k {
                            let (si, sj) = (i as isize + a as isize - r, j as isize + b as isize - r);
                            if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                                continue;
                            }
                            let xv = x[(si as usize * w + sj as usize) * d + c];
                            let kv = ker[((((i * w + j) * k + a) * k + b) * g) + grp];
                            acc += xv * kv;
                        }
                    }
                    out[(i * w + j) * d + c] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn affinity_hand_value() {
        let mut sp = spec(2, 3, 1, 1);
        sp.heads = 1;
        let layer = LaConvLayer::new("l", sp).unwrap();
        let mut store = ParamStore::<f64>::new();
        layer.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        store.set("l.w_x", Tensor::eye(2)).unwrap();
        store.set("l.w_y", Tensor::eye(2)).unwrap();
        let mut s = Session::new(&mut store, false);
        let x = s.graph.constant(Tensor::new([1, 1, 2], vec![1.0, 0.0]).unwrap());
        let y = text(&mut s.graph, Tensor::new([1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(), vec![true; 2]);
        let a = layer.affinity(&mut s, x, &y).unwrap();
        let v = s.graph.value(a);
        assert!((v[0] - 0.6698).abs() < 1e-4 && (v[1] - 0.3302).abs() < 1e-4, "{v:?}");
    }

    #[test]
    fn affinity_rows_are_distributions_and_ignore_pads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = LaConvLayer::new("l", spec(8, 3, 2, 2)).unwrap();
        let mut store = ParamStore::<f64>::new();
        layer.init(&mut store, &mut rng).unwrap();
        let mut s = Session::new(&mut store, false);
        let x = s.graph.constant(rand_tensor(&[2, 4, 32], &mut rng));
        let mask = vec![true, true, false, true, false, false];
        let y = text(&mut s.graph, rand_tensor(&[2, 3, 8], &mut rng), mask.clone());
        let a = layer.affinity(&mut s, x, &y).unwrap();
        assert_eq!(s.graph.shape(a), &[4, 4, 3]);
        for (r, row) in s.graph.value(a).chunks(3).enumerate() {
            let b = r / 8;
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for (t, &p) in row.iter().enumerate() {
                assert!(p >= 0.0);
                if !mask[b * 3 + t] {
                    assert_eq!(p, 0.0);
                }
            }
        }
        // Sample 1 has a single real word, so its attention is all on it.
        let s1 = &s.graph.value(a)[2 * 4 * 3..];
        assert!(s1.chunks(3).all(|r| r[0] == 1.0));
    }

    #[test]
    fn condition_matrix_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, l, d, heads) = (4, 3, 8, 2);
        let layer = LaConvLayer::new("l", spec(d, 3, 2, 1)).unwrap();
        let mut store = ParamStore::<f64>::new();
        layer.init(&mut store, &mut rng).unwrap();
        let wa = store.value("l.w_a").unwrap().clone();
        let wc = store.value("l.w_c").unwrap().clone();
        let yt = rand_tensor(&[1, l, d], &mut rng);
        let mut s = Session::new(&mut store, false);
        let x = s.graph.constant(rand_tensor(&[1, n, d], &mut rng));
        let y = text(&mut s.graph, yt.clone(), vec![true; l]);
        let a = layer.affinity(&mut s, x, &y).unwrap();
        let c = layer.condition_matrix(&mut s, a, &y).unwrap();
        let av = s.graph.value(a);

        let dh = d / heads;
        let mut v = vec![0.0; l * d];
        for t in 0..l {
            for j in 0..d {
                for p in 0..d {
                    v[t * d + j] += yt.data()[t * d + p] * wa.data()[p * d + j];
                }
            }
        }
        let mut ctx = vec![0.0; n * d];
        for hd in 0..heads {
            for i in 0..n {
                for j in 0..dh {
                    for t in 0..l {
                        ctx[i * d + hd * dh + j] += av[(hd * n + i) * l + t] * v[t * d + hd * dh + j];
                    }
                }
            }
        }
        for i in 0..n {
            for j in 0..d {
                let mut acc = 0.0;
                for p in 0..d {
                    acc += ctx[i * d + p] * wc.data()[p * d + j];
                }
                assert!((acc.max(0.0) - s.graph.value(c)[i * d + j]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn zero_w_c_gives_zero_condition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = LaConvLayer::new("l", spec(8, 3, 2, 1)).unwrap();
        let mut store = ParamStore::<f64>::new();
        layer.init(&mut store, &mut rng).unwrap();
        store.set("l.w_c", Tensor::zeros([8, 8])).unwrap();
        let mut s = Session::new(&mut store, false);
        let x = s.graph.constant(rand_tensor(&[1, 4, 8], &mut rng));
        let y = text(&mut s.graph, rand_tensor(&[1, 3, 8], &mut rng), vec![true; 3]);
        let a = layer.affinity(&mut s, x, &y).unwrap();
        let c = layer.condition_matrix(&mut s, a, &y).unwrap();
        assert!(s.graph.value(c).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn naive_conv_oracle_agrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (h, w, d, g, k) = (5, 5, 8, 4, 3);
        let x = rand_tensor(&[h, w, d], &mut rng);
        let ker = rand_tensor(&[h, w, k, k, g], &mut rng);
        let out = dynamic_depthwise_conv(&x, &ker).unwrap();
        let want = naive_conv(h, w, d, k, g, x.data(), ker.data());
        for (a, b) in out.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn delta_kernels_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&[4, 3, 4], &mut rng);
        let mut ker = Tensor::<f64>::zeros([4, 3, 5, 5, 2]);
        for p in 0..12 {
            for grp in 0..2 {
                ker.data_mut()[((p * 5 + 2) * 5 + 2) * 2 + grp] = 1.0;
            }
        }
        assert_eq!(dynamic_depthwise_conv(&x, &ker).unwrap().data(), x.data());
    }

    #[test]
    fn zero_w1_gives_bias_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let layer = LaConvLayer::new("l", spec(8, 3, 2, 1)).unwrap();
        let mut store = ParamStore::<f64>::new();
        layer.init(&mut store, &mut rng).unwrap();
        store.set("l.w_1", Tensor::zeros([8, 18])).unwrap();
        let b1 = rand_tensor(&[18], &mut rng);
        store.set("l.b_1", b1.clone()).unwrap();
        let mut s = Session::new(&mut store, false);
        let c = s.graph.constant(rand_tensor(&[1, 6, 8], &mut rng));
        let k = layer.generate_kernels(&mut s, c, 2, 3).unwrap();
        assert_eq!(s.graph.shape(k), &[1, 2, 3, 3, 3, 2]);
        for chunk in s.graph.value(k).chunks(18) {
            assert_eq!(chunk, b1.data());
        }
    }

    #[test]
    fn unpack_condition_broadcasts_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let one = Tensor::new([1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let c = pixel_unpack_condition(&one, 2, 2, 2).unwrap();
        assert!(c.data().chunks(3).all(|r| r == [1.0, 2.0, 3.0]));
        let packed = rand_tensor(&[4, 5], &mut rng);
        assert_eq!(pixel_unpack_condition(&packed, 1, 2, 2).unwrap().data(), packed.data());
        let c = pixel_unpack_condition(&packed, 2, 4, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let cell = (i / 2) * 2 + j / 2;
                assert_eq!(&c.data()[(i * 4 + j) * 5..][..5], &packed.data()[cell * 5..][..5]);
            }
        }
        assert!(pixel_unpack_condition(&packed, 2, 4, 6).is_err());
    }

    #[test]
    fn pack_round_trips_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&[8, 8, 4], &mut rng);
        for s in [1, 2, 4, 8] {
            let p = pixel_pack(&x, s).unwrap();
            assert_eq!(p.shape(), &[64 / (s * s), s * s * 4]);
            assert_eq!(pixel_unpack(&p, s, 8, 8).unwrap().data(), x.data());
        }
        assert!(pixel_pack(&x, 3).is_err());
    }

    fn block_setup(s: usize, seed: u64) -> (LaConvBlock, ParamStore<f64>, Tensor<f64>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = LaConvBlock::new("b", spec(8, 3, 4, s)).unwrap();
        let mut store = ParamStore::new();
        block.init(&mut store, &mut rng).unwrap();
        let x = rand_tensor(&[1, 8, 8, 8], &mut rng);
        let y = rand_tensor(&[1, 3, 8], &mut rng);
        (block, store, x, y)
    }

    #[test]
    fn block_shape_is_invariant_to_packing() {
        for s in [1, 2, 4] {
            let (block, mut store, x, y) = block_setup(s, 9);
            let mut sess = Session::new(&mut store, true);
            let xv = sess.graph.constant(x);
            let yv = text(&mut sess.graph, y, vec![true; 3]);
            let out = block.forward(&mut sess, xv, &yv).unwrap();
            assert_eq!(sess.graph.shape(out), &[1, 8, 8, 8]);
        }
    }

    #[test]
    fn block_without_dynamic_path_matches_reference() {
        let (block, mut store, x, y) = block_setup(2, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        store.set("b.w_1", Tensor::zeros([8, 36])).unwrap();
        store.set("b.b_1", Tensor::zeros([36])).unwrap();
        store.set("b.mlp.w_in", Tensor::zeros([8, 32])).unwrap();
        let beta = rand_tensor(&[8], &mut rng);
        let beta_out = rand_tensor(&[8], &mut rng);
        store.set("b.bn.beta", beta.clone()).unwrap();
        store.set("b.mlp.bn_in.beta", rand_tensor(&[32], &mut rng)).unwrap();
        store.set("b.mlp.bn_out.beta", beta_out.clone()).unwrap();
        let mut sess = Session::new(&mut store, true);
        let xv = sess.graph.constant(x.clone());
        let yv = text(&mut sess.graph, y, vec![true; 3]);
        let out = block.forward(&mut sess, xv, &yv).unwrap();
        // f = 0 and the MLP input is constant, so both BNs emit their shift.
        for (i, &o) in sess.graph.value(out).iter().enumerate() {
            let c = i % 8;
            let want = (x.data()[i] + beta.data()[c]).max(0.0) + beta_out.data()[c];
            assert!((o - want).abs() < 1e-9, "{o} vs {want}");
        }
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let block = LaConvBlock::new("b", spec(8, 3, 4, 2)).unwrap();
        let mut store = ParamStore::<f64>::new();
        block.init(&mut store, &mut rng).unwrap();
        // Non-zero biases and shifts so every parameter gets a gradient.
        for name in ["b.b_1", "b.bn.beta", "b.mlp.bn_in.beta", "b.mlp.bn_out.beta"] {
            let shape = store.value(name).unwrap().shape().to_vec();
            store.set(name, rand_tensor(&shape, &mut rng)).unwrap();
        }
        let names: Vec<String> = store.trainable().map(|p| p.name.clone()).collect();
        let mut inputs = vec![rand_tensor(&[1, 4, 4, 8], &mut rng), rand_tensor(&[1, 3, 8], &mut rng)];
        inputs.extend(names.iter().map(|n| store.value(n).unwrap().clone()));
        let report = gradcheck::check(&inputs, 1e-3, |g, vars| {
            let mut st = store.clone();
            let mut sess = Session::with_graph(std::mem::take(g), &mut st, true);
            for (n, &v) in names.iter().zip(&vars[2..]) {
                sess.bind(n, v)?;
            }
            let y = TextVars::from_features(&mut sess.graph, vars[1], &[true, true, false])?;
            let out = block.forward(&mut sess, vars[0], &y)?;
            *g = sess.into_graph();
            Ok(out)
        })
        .unwrap();
        assert!(report.max_rel_err() < 1e-3, "{report:?}");
        assert!(report.skipped() * 20 < report.checked(), "{report:?}");
    }

    #[test]
    fn text_permutation_leaves_condition_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let layer = LaConvLayer::new("l", spec(8, 3, 2, 2)).unwrap();
        let mut store = ParamStore::<f64>::new();
        layer.init(&mut store, &mut rng).unwrap();
        let x = rand_tensor(&[1, 4, 4, 8], &mut rng);
        let y = rand_tensor(&[1, 3, 8], &mut rng);
        let perm = [2usize, 0, 1];
        let mask = [true, true, false];
        let mut yp = y.clone();
        for (dst, &src) in perm.iter().enumerate() {
            yp.data_mut()[dst * 8..][..8].copy_from_slice(&y.data()[src * 8..][..8]);
        }
        let maskp: Vec<bool> = perm.iter().map(|&p| mask[p]).collect();
        let run = |yt: Tensor<f64>, m: Vec<bool>, store: &mut ParamStore<f64>| {
            let mut s = Session::new(store, false);
            s.set_capture(Some("l".into()));
            let xv = s.graph.constant(x.clone());
            let yv = text(&mut s.graph, yt, m);
            let out = layer.forward(&mut s, xv, &yv).unwrap();
            let c = s.captured()["condition"];
            (s.graph.value(c).to_vec(), s.graph.value(out).to_vec())
        };
        let (c0, o0) = run(y, mask.to_vec(), &mut store);
        let (c1, o1) = run(yp, maskp, &mut store);
        assert!(c0.iter().zip(&c1).all(|(a, b)| (a - b).abs() < 1e-6));
        assert!(o0.iter().zip(&o1).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn language_only_kernels_are_position_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut sp = spec(8, 3, 2, 2);
        sp.generation = Generation::LanguageOnly;
        let layer = LaConvLayer::new("l", sp).unwrap();
        let mut store = ParamStore::<f64>::new();
        layer.init(&mut store, &mut rng).unwrap();
        assert!(!store.contains("l.w_x"));
        let mut s = Session::new(&mut store, false);
        s.set_capture(Some("l".into()));
        let xv = s.graph.constant(rand_tensor(&[2, 4, 4, 8], &mut rng));
        let yv = text(&mut s.graph, rand_tensor(&[2, 3, 8], &mut rng), vec![true; 6]);
        layer.forward(&mut s, xv, &yv).unwrap();
        let k = s.graph.value(s.captured()["kernels"]);
        for b in 0..2 {
            let sample = &k[b * 16 * 18..][..16 * 18];
            assert!(sample.chunks(18).all(|c| c == &sample[..18]));
        }
    }

    #[test]
    fn forward_is_deterministic_and_text_sensitive() {
        let (block, mut store, x, y) = block_setup(2, 15);
        let mut y2 = y.clone();
        y2.data_mut()[8..16].iter_mut().for_each(|v| *v = -*v);
        let mut run = |yt: Tensor<f64>| {
            let mut s = Session::new(&mut store, false);
            let xv = s.graph.constant(x.clone());
            let yv = text(&mut s.graph, yt, vec![true; 3]);
            let out = block.layer.forward(&mut s, xv, &yv).unwrap();
            s.graph.value(out).to_vec()
        };
        let a = run(y.clone());
        assert_eq!(a, run(y));
        let b = run(y2);
        assert!(a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max) > 1e-3);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(LaConvLayer::new("l", spec(8, 4, 2, 1)).is_err());
        assert!(LaConvLayer::new("l", spec(8, 3, 3, 1)).is_err());
        let mut sp = spec(8, 3, 2, 1);
        sp.heads = 3;
        assert!(LaConvLayer::new("l", sp).is_err());
    }
}
