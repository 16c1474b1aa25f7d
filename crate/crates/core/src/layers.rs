//! Network layers expressed as compositions of tape operations.
//!
//! Activations are laid out `[H, W, D]` (channels last); vectors flowing
//! into the highway and dense layers are rows `[1, F]`.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Projections for one attention head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T = Tensor> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
}

/// Attention heads plus the shared output projection `W_mh`.
#[derive(Clone, Debug, PartialEq)]
pub struct MhaParams<T = Tensor> {
    pub heads: Vec<HeadParams<T>>,
    pub w_mh: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T = Tensor> {
    pub kernel: T,
    pub bias: T,
}

/// Transform (`w_h`, `b_h`) and gate (`w_t`, `b_t`) weights of a highway layer.
#[derive(Clone, Debug, PartialEq)]
pub struct HighwayParams<T = Tensor> {
    pub w_h: T,
    pub b_h: T,
    pub w_t: T,
    pub b_t: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams<T = Tensor> {
    pub w: T,
    pub b: T,
}

pub fn conv2d(tape: &mut Tape, x: Var, p: &ConvParams<Var>) -> Result<Var> {
    tape.conv2d(x, p.kernel, p.bias)
}

/// Scaled dot-product attention of one head over `tokens[T, D]`.
///
/// Returns `(output[T, d_v], weights[T, T])`.
pub fn attention_head(tape: &mut Tape, tokens: Var, head: &HeadParams<Var>) -> Result<(Var, Var)> {
    let q = tape.matmul(tokens, head.w_q)?;
    let k = tape.matmul(tokens, head.w_k)?;
    let v = tape.matmul(tokens, head.w_v)?;
    let d_k = tape.value(q).shape()[1];
    // scaling Q instead of the n x n score matrix
    let q = tape.scale(q, 1.0 / (d_k as f64).sqrt());
    let weights = tape.attention_weights(q, k)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

/// Multi-head self-attention over the spatial positions of `x[H, W, D]`.
///
/// Each of the `H*W` positions is a token with a `D`-dimensional feature.
/// Head outputs are concatenated and projected by `W_mh`, then reshaped back
/// to `[H, W, attn_channels]`.
pub fn multi_head_attention(tape: &mut Tape, x: Var, p: &MhaParams<Var>) -> Result<Var> {
    let &[h, w, d] = tape.value(x).shape() else {
        return Err(Error::dim(
            "multi_head_attention",
            format!("expected x[H,W,D], got {:?}", tape.value(x).shape()),
        ));
    };
    if p.heads.is_empty() {
        return Err(Error::Config("multi-head attention needs at least one head".into()));
    }
    let tokens = tape.reshape(x, &[h * w, d])?;
    let mut outs = Vec::with_capacity(p.heads.len());
    for head in &p.heads {
        outs.push(attention_head(tape, tokens, head)?.0);
    }
    let joined = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 1)? };
    let projected = tape.matmul(joined, p.w_mh)?;
    let channels = tape.value(projected).shape()[1];
    tape.reshape(projected, &[h, w, channels])
}

/// Attention-augmented convolution: convolutional feature maps followed by
/// self-attention feature maps along the channel axis.
pub fn aaconv(tape: &mut Tape, x: Var, conv: &ConvParams<Var>, attn: Option<&MhaParams<Var>>) -> Result<Var> {
    let c = conv2d(tape, x, conv)?;
    match attn {
        Some(attn) => {
            let a = multi_head_attention(tape, x, attn)?;
            tape.concat(&[c, a], 2)
        }
        None => Ok(c),
    }
}

/// Gated highway layer on a row `x[1, F]`:
/// `y = T * tanh(x W_h + b_h) + (1 - T) * x` with `T = sigmoid(x W_t + b_t)`.
pub fn highway(tape: &mut Tape, x: Var, p: &HighwayParams<Var>) -> Result<Var> {
    let f = tape.value(x).shape()[1];
    for w in [p.w_h, p.w_t] {
        if tape.value(w).shape() != [f, f] {
            return Err(Error::Config(format!(
                "highway weights must be {f}x{f}, got {:?}",
                tape.value(w).shape()
            )));
        }
    }
    let zh = tape.matmul(x, p.w_h)?;
    let zh = tape.add_bias(zh, p.b_h)?;
    let transformed = tape.tanh(zh);
    let zt = tape.matmul(x, p.w_t)?;
    let zt = tape.add_bias(zt, p.b_t)?;
    let gate = tape.sigmoid(zt);
    // x + T * (H - x)
    let delta = tape.sub(transformed, x)?;
    let gated = tape.mul(gate, delta)?;
    tape.add(x, gated)
}

pub fn dense(tape: &mut Tape, x: Var, p: &DenseParams<Var>) -> Result<Var> {
    let z = tape.matmul(x, p.w)?;
    tape.add_bias(z, p.b)
}

pub fn maxpool(tape: &mut Tape, x: Var, p: usize) -> Result<Var> {
    tape.maxpool(x, p)
}

/// Inverted dropout: in training each element is zeroed with probability
/// `rate` and survivors are scaled by `1 / (1 - rate)`.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, training: bool, rng: &mut impl Rng) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let shape = tape.value(x).shape().to_vec();
    let mask = Tensor::from_fn(shape, |_| if rng.gen::<f64>() < rate { 0.0 } else { keep });
    tape.mul_const(x, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn at(t: &Tensor, idx: &[usize]) -> f64 {
        let mut flat = 0;
        for (i, n) in idx.iter().zip(t.shape()) {
            flat = flat * n + i;
        }
        t.data()[flat]
    }

    fn conv_oracle(x: &Tensor, k: &Tensor, b: &Tensor) -> Tensor {
        let (h, w, din) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (ks, dout) = (k.shape()[0], k.shape()[3]);
        let pad = (ks / 2) as isize;
        let mut out = Tensor::zeros([h, w, dout]);
        for i in 0..h {
            for j in 0..w {
                for o in 0..dout {
                    let mut s = b.data()[o];
                    for ki in 0..ks {
                        for kj in 0..ks {
                            let (ii, jj) = (i as isize + ki as isize - pad, j as isize + kj as isize - pad);
                            if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                continue;
                            }
                            for c in 0..din {
                                s += at(x, &[ii as usize, jj as usize, c]) * at(k, &[ki, kj, c, o]);
                            }
                        }
                    }
                    out.data_mut()[(i * w + j) * dout + o] = s;
                }
            }
        }
        out
    }

    /// Explicit-loop single-head attention.
    fn attention_oracle(x: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor) -> Tensor {
        let (t, d) = (x.shape()[0], x.shape()[1]);
        let (dk, dv) = (wq.shape()[1], wv.shape()[1]);
        let proj = |w: &Tensor, n: usize| {
            let mut m = vec![vec![0.0; n]; t];
            for (r, row) in m.iter_mut().enumerate() {
                for (c, v) in row.iter_mut().enumerate() {
                    for i in 0..d {
                        *v += at(x, &[r, i]) * at(w, &[i, c]);
                    }
                }
            }
            m
        };
        let (q, k, v) = (proj(wq, dk), proj(wk, dk), proj(wv, dv));
        let mut out = Tensor::zeros([t, dv]);
        for a in 0..t {
            let scores: Vec<f64> = (0..t)
                .map(|b| (0..dk).map(|i| q[a][i] * k[b][i]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
            for (b, s) in scores.iter().enumerate() {
                let wgt = (s - max).exp() / z;
                for c in 0..dv {
                    out.data_mut()[a * dv + c] += wgt * v[b][c];
                }
            }
        }
        out
    }

    fn run_conv(x: &Tensor, k: &Tensor, b: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let p = ConvParams {
            kernel: tape.leaf(k.clone()),
            bias: tape.leaf(b.clone()),
        };
        let out = conv2d(&mut tape, xv, &p)?;
        Ok(tape.value(out).clone())
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::from_fn([4, 5, 1], |i| i as f64 * 0.5);
        let out = run_conv(&x, &Tensor::ones([1, 1, 1, 1]), &Tensor::zeros([1])).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn conv_bias_only() {
        let x = Tensor::from_fn([4, 5, 2], |i| i as f64);
        let out = run_conv(&x, &Tensor::zeros([3, 3, 2, 3]), &Tensor::full([3], 1.5)).unwrap();
        assert_eq!(out, Tensor::full([4, 5, 3], 1.5));
    }

    #[test]
    fn conv_averaging_kernel_on_ramp_matches_loops() {
        let x = Tensor::from_fn([5, 5, 1], |i| (i / 5 + i % 5) as f64);
        let k = Tensor::full([3, 3, 1, 1], 1.0 / 9.0);
        let b = Tensor::zeros([1]);
        let out = run_conv(&x, &k, &b).unwrap();
        let oracle = conv_oracle(&x, &k, &b);
        assert!(out.max_abs_diff(&oracle) < 1e-14);
        // interior cell of a linear ramp averages to its own value
        assert!((at(&out, &[2, 2, 0]) - 4.0).abs() < 1e-14);
        // corner sees only 4 in-bounds taps: (0+1+1+2)/9
        assert!((at(&out, &[0, 0, 0]) - 4.0 / 9.0).abs() < 1e-14);
    }

    #[test]
    fn conv_random_matches_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, &[6, 7, 3]);
        let k = rand_tensor(&mut rng, &[3, 3, 3, 4]);
        let b = rand_tensor(&mut rng, &[4]);
        let out = run_conv(&x, &k, &b).unwrap();
        assert!(out.max_abs_diff(&conv_oracle(&x, &k, &b)) < 1e-13);
    }

    #[test]
    fn conv_depth_mismatch() {
        let err = run_conv(&Tensor::zeros([3, 3, 2]), &Tensor::zeros([3, 3, 1, 1]), &Tensor::zeros([1]));
        assert!(matches!(err, Err(Error::Dimension { .. })));
    }

    fn run_head(x: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor) -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let head = HeadParams {
            w_q: tape.leaf(wq.clone()),
            w_k: tape.leaf(wk.clone()),
            w_v: tape.leaf(wv.clone()),
        };
        let (out, weights) = attention_head(&mut tape, xv, &head).unwrap();
        (tape.value(out).clone(), tape.value(weights).clone())
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[1, 3]);
        let (wq, wk, wv) = (rand_tensor(&mut rng, &[3, 2]), rand_tensor(&mut rng, &[3, 2]), rand_tensor(&mut rng, &[3, 2]));
        let (out, weights) = run_head(&x, &wq, &wk, &wv);
        assert_eq!(weights.data(), &[1.0]);
        assert_eq!(out, x.matmul(&wv).unwrap());
    }

    #[test]
    fn zero_keys_give_mean_of_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[4, 3]);
        let wq = rand_tensor(&mut rng, &[3, 2]);
        let wv = rand_tensor(&mut rng, &[3, 2]);
        let (out, weights) = run_head(&x, &wq, &Tensor::zeros([3, 2]), &wv);
        assert!(weights.data().iter().all(|&w| (w - 0.25).abs() < 1e-15));
        let v = x.matmul(&wv).unwrap();
        for r in 0..4 {
            for c in 0..2 {
                let mean = (0..4).map(|i| at(&v, &[i, c])).sum::<f64>() / 4.0;
                assert!((at(&out, &[r, c]) - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn attention_head_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[3, 2]);
        let (wq, wk, wv) = (rand_tensor(&mut rng, &[2, 2]), rand_tensor(&mut rng, &[2, 2]), rand_tensor(&mut rng, &[2, 3]));
        let (out, weights) = run_head(&x, &wq, &wk, &wv);
        assert!(out.max_abs_diff(&attention_oracle(&x, &wq, &wk, &wv)) < 1e-14);
        for row in weights.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    struct MhaFixture {
        x: Tensor,
        heads: Vec<[Tensor; 3]>,
        w_mh: Tensor,
    }

    fn mha_fixture(seed: u64, hwd: [usize; 3], heads: usize, d_k: usize, d_v: usize) -> MhaFixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = hwd[2];
        let x = rand_tensor(&mut rng, &hwd);
        let heads = (0..heads)
            .map(|_| {
                [
                    rand_tensor(&mut rng, &[d, d_k]),
                    rand_tensor(&mut rng, &[d, d_k]),
                    rand_tensor(&mut rng, &[d, d_v]),
                ]
            })
            .collect::<Vec<_>>();
        let c = heads.len() * d_v;
        let w_mh = rand_tensor(&mut rng, &[c, c]);
        MhaFixture { x, heads, w_mh }
    }

    fn run_mha(f: &MhaFixture, x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let p = MhaParams {
            heads: f
                .heads
                .iter()
                .map(|[q, k, v]| HeadParams {
                    w_q: tape.leaf(q.clone()),
                    w_k: tape.leaf(k.clone()),
                    w_v: tape.leaf(v.clone()),
                })
                .collect(),
            w_mh: tape.leaf(f.w_mh.clone()),
        };
        let out = multi_head_attention(&mut tape, xv, &p).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn mha_single_head_identity_projection() {
        let mut f = mha_fixture(4, [2, 3, 2], 1, 2, 3);
        f.w_mh = Tensor::eye(3);
        let out = run_mha(&f, &f.x);
        let tokens = f.x.reshape([6, 2]).unwrap();
        let [q, k, v] = &f.heads[0];
        let expect = attention_oracle(&tokens, q, k, v).reshape([2, 3, 3]).unwrap();
        assert!(out.max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn mha_two_heads_match_per_head_oracle() {
        let f = mha_fixture(5, [2, 2, 2], 2, 4, 2);
        let tokens = f.x.reshape([4, 2]).unwrap();
        let per_head: Vec<Tensor> = f
            .heads
            .iter()
            .map(|[q, k, v]| attention_oracle(&tokens, q, k, v))
            .collect();
        // concat along features, then project with explicit loops
        let mut expect = Tensor::zeros([4, 4]);
        for t in 0..4 {
            let row: Vec<f64> = per_head.iter().flat_map(|h| h.data()[t * 2..t * 2 + 2].to_vec()).collect();
            for o in 0..4 {
                expect.data_mut()[t * 4 + o] = (0..4).map(|i| row[i] * at(&f.w_mh, &[i, o])).sum();
            }
        }
        let out = run_mha(&f, &f.x);
        assert!(out.max_abs_diff(&expect.reshape([2, 2, 4]).unwrap()) < 1e-14);
    }

    #[test]
    fn mha_is_permutation_equivariant_over_tokens() {
        let f = mha_fixture(6, [3, 2, 2], 2, 4, 2);
        let perm = [4usize, 0, 5, 2, 1, 3];
        let d = 2;
        let permuted = Tensor::from_fn([3, 2, 2], |i| f.x.data()[perm[i / d] * d + i % d]);
        let base = run_mha(&f, &f.x);
        let out = run_mha(&f, &permuted);
        let c = 4;
        for (t, &src) in perm.iter().enumerate() {
            for ch in 0..c {
                let (a, b) = (out.data()[t * c + ch], base.data()[src * c + ch]);
                assert!((a - b).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn aaconv_without_attention_is_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, &[4, 4, 2]);
        let k = rand_tensor(&mut rng, &[3, 3, 2, 5]);
        let b = rand_tensor(&mut rng, &[5]);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let p = ConvParams {
            kernel: tape.leaf(k.clone()),
            bias: tape.leaf(b.clone()),
        };
        let out = aaconv(&mut tape, xv, &p, None).unwrap();
        assert_eq!(tape.value(out), &run_conv(&x, &k, &b).unwrap());
    }

    fn run_highway(x: &Tensor, p: &HighwayParams) -> Tensor {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let pv = HighwayParams {
            w_h: tape.leaf(p.w_h.clone()),
            b_h: tape.leaf(p.b_h.clone()),
            w_t: tape.leaf(p.w_t.clone()),
            b_t: tape.leaf(p.b_t.clone()),
        };
        let out = highway(&mut tape, xv, &pv).unwrap();
        tape.value(out).clone()
    }

    fn highway_fixture(seed: u64, f: usize) -> (Tensor, HighwayParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[1, f]);
        let p = HighwayParams {
            w_h: rand_tensor(&mut rng, &[f, f]),
            b_h: rand_tensor(&mut rng, &[f]),
            w_t: rand_tensor(&mut rng, &[f, f]),
            b_t: rand_tensor(&mut rng, &[f]),
        };
        (x, p)
    }

    #[test]
    fn highway_gate_limits() {
        let (x, mut p) = highway_fixture(8, 3);
        p.b_t = Tensor::full([3], -1e6);
        assert!(run_highway(&x, &p).max_abs_diff(&x) < 1e-12);

        p.b_t = Tensor::full([3], 1e6);
        let h = x.matmul(&p.w_h).unwrap();
        let expect = Tensor::from_fn([1, 3], |i| (h.data()[i] + p.b_h.data()[i]).tanh());
        assert!(run_highway(&x, &p).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn highway_matches_elementwise_evaluation() {
        let (x, p) = highway_fixture(9, 3);
        let out = run_highway(&x, &p);
        for j in 0..3 {
            let mut zh = p.b_h.data()[j];
            let mut zt = p.b_t.data()[j];
            for i in 0..3 {
                zh += x.data()[i] * at(&p.w_h, &[i, j]);
                zt += x.data()[i] * at(&p.w_t, &[i, j]);
            }
            let t = 1.0 / (1.0 + (-zt).exp());
            let y = t * zh.tanh() + (1.0 - t) * x.data()[j];
            assert!((out.data()[j] - y).abs() < 1e-15);
        }
    }

    #[test]
    fn highway_rejects_non_square_weights() {
        let (x, mut p) = highway_fixture(10, 3);
        p.w_t = Tensor::zeros([3, 2]);
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let pv = HighwayParams {
            w_h: tape.leaf(p.w_h.clone()),
            b_h: tape.leaf(p.b_h.clone()),
            w_t: tape.leaf(p.w_t.clone()),
            b_t: tape.leaf(p.b_t.clone()),
        };
        assert!(matches!(highway(&mut tape, xv, &pv), Err(Error::Config(_))));
    }

    fn pool(x: &Tensor, p: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let out = maxpool(&mut tape, xv, p)?;
        Ok(tape.value(out).clone())
    }

    #[test]
    fn maxpool_examples() {
        let x = Tensor::from_fn([3, 5, 2], |i| (i as f64 * 1.7).sin());
        assert_eq!(pool(&x, 1).unwrap(), x);
        assert_eq!(pool(&Tensor::full([4, 6, 1], 2.5), 2).unwrap(), Tensor::full([2, 3, 1], 2.5));
        let sq = Tensor::new([2, 2, 1], vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(pool(&sq, 2).unwrap().data(), &[4.0]);
        // floor division drops the trailing row and column
        assert_eq!(pool(&Tensor::zeros([15, 35, 3]), 2).unwrap().shape(), &[7, 17, 3]);
        assert!(matches!(pool(&x, 4), Err(Error::Dimension { .. })));
        assert!(pool(&x, 0).is_err());
    }

    fn drop(x: &Tensor, rate: f64, training: bool, seed: u64) -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let out = dropout(&mut tape, xv, rate, training, &mut rng)?;
        Ok(tape.value(out).clone())
    }

    #[test]
    fn dropout_behaviour() {
        let x = Tensor::from_fn([10], |i| i as f64);
        assert_eq!(drop(&x, 0.0, true, 1).unwrap(), x);
        assert_eq!(drop(&x, 0.9, false, 1).unwrap(), x);
        assert!(matches!(drop(&x, 1.0, true, 1), Err(Error::Config(_))));
        assert!(drop(&x, -0.1, false, 1).is_err());
        assert_eq!(drop(&x, 0.5, true, 42).unwrap(), drop(&x, 0.5, true, 42).unwrap());

        let ones = Tensor::ones([100_000]);
        let out = drop(&ones, 0.5, true, 3).unwrap();
        let mean = out.data().iter().sum::<f64>() / out.len() as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        assert!(out.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
