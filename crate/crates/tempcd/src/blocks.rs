//! Reusable neural blocks: multi-head self-attention, a three-layer MLP, and
//! a DETR-style per-frame decoder layer (self-attention over queries,
//! cross-attention to frame features, feed-forward), all post-norm.

use crate::params::{Binder, Init};
use crate::tensor::{Tape, TensorId};

/// Default layer-norm epsilon (configurable per call site).
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Default epsilon added to each norm in cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

/// Fused per-head Q/K/V projections plus output projection and post-norm.
#[derive(Clone, Copy)]
pub struct MhsaParams {
    pub wq: TensorId,
    pub wk: TensorId,
    pub wv: TensorId,
    pub wo: TensorId,
    pub ln_gain: TensorId,
    pub ln_bias: TensorId,
    pub heads: usize,
}

impl MhsaParams {
    pub fn bind(b: &mut Binder, prefix: &str, c: usize, heads: usize) -> MhsaParams {
        assert_eq!(c % heads, 0, "width {} not divisible by head count {}", c, heads);
        MhsaParams {
            wq: b.param(&format!("{prefix}.wq"), &[c, c], Init::XavierUniform),
            wk: b.param(&format!("{prefix}.wk"), &[c, c], Init::XavierUniform),
            wv: b.param(&format!("{prefix}.wv"), &[c, c], Init::XavierUniform),
            wo: b.param(&format!("{prefix}.wo"), &[c, c], Init::XavierUniform),
            ln_gain: b.param(&format!("{prefix}.ln_gain"), &[c], Init::Ones),
            ln_bias: b.param(&format!("{prefix}.ln_bias"), &[c], Init::Zeros),
            heads,
        }
    }
}

/// Cross-attention from queries to a separate key/value set; same layout.
pub type CrossAttnParams = MhsaParams;

/// A layer-norm gain/bias pair.
#[derive(Clone, Copy)]
pub struct LnParams {
    pub gain: TensorId,
    pub bias: TensorId,
}

impl LnParams {
    pub fn bind(b: &mut Binder, prefix: &str, c: usize) -> LnParams {
        LnParams {
            gain: b.param(&format!("{prefix}.gain"), &[c], Init::Ones),
            bias: b.param(&format!("{prefix}.bias"), &[c], Init::Zeros),
        }
    }
}

/// Three-layer MLP, C -> H -> H -> C with relu between layers.
#[derive(Clone, Copy)]
pub struct Mlp3Params {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
    pub w3: TensorId,
    pub b3: TensorId,
}

impl Mlp3Params {
    pub fn bind(b: &mut Binder, prefix: &str, c: usize, hidden: usize) -> Mlp3Params {
        Mlp3Params::bind_with_out(b, prefix, c, hidden, c)
    }

    pub fn bind_with_out(b: &mut Binder, prefix: &str, c: usize, hidden: usize, out: usize) -> Mlp3Params {
        Mlp3Params {
            w1: b.param(&format!("{prefix}.w1"), &[c, hidden], Init::XavierUniform),
            b1: b.param(&format!("{prefix}.b1"), &[hidden], Init::Zeros),
            w2: b.param(&format!("{prefix}.w2"), &[hidden, hidden], Init::XavierUniform),
            b2: b.param(&format!("{prefix}.b2"), &[hidden], Init::Zeros),
            w3: b.param(&format!("{prefix}.w3"), &[hidden, out], Init::XavierUniform),
            b3: b.param(&format!("{prefix}.b3"), &[out], Init::Zeros),
        }
    }
}

/// Two-layer feed-forward with residual and post-norm.
#[derive(Clone, Copy)]
pub struct FfnParams {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
    pub ln_gain: TensorId,
    pub ln_bias: TensorId,
}

impl FfnParams {
    pub fn bind(b: &mut Binder, prefix: &str, c: usize, hidden: usize) -> FfnParams {
        FfnParams {
            w1: b.param(&format!("{prefix}.w1"), &[c, hidden], Init::XavierUniform),
            b1: b.param(&format!("{prefix}.b1"), &[hidden], Init::Zeros),
            w2: b.param(&format!("{prefix}.w2"), &[hidden, c], Init::XavierUniform),
            b2: b.param(&format!("{prefix}.b2"), &[c], Init::Zeros),
            ln_gain: b.param(&format!("{prefix}.ln_gain"), &[c], Init::Ones),
            ln_bias: b.param(&format!("{prefix}.ln_bias"), &[c], Init::Zeros),
        }
    }
}

/// One DETR decoder block: query self-attention, cross-attention to the
/// frame's features, feed-forward.
#[derive(Clone, Copy)]
pub struct DetrLayerParams {
    pub self_attn: MhsaParams,
    pub cross: CrossAttnParams,
    pub ffn: FfnParams,
}

impl DetrLayerParams {
    pub fn bind(b: &mut Binder, prefix: &str, c: usize, heads: usize, ffn_hidden: usize) -> DetrLayerParams {
        DetrLayerParams {
            self_attn: MhsaParams::bind(b, &format!("{prefix}.self"), c, heads),
            cross: CrossAttnParams::bind(b, &format!("{prefix}.cross"), c, heads),
            ffn: FfnParams::bind(b, &format!("{prefix}.ffn"), c, ffn_hidden),
        }
    }
}

/// `x · w + bias`, accepting rank-1 input.
pub fn linear(t: &mut Tape, x: TensorId, w: TensorId, bias: TensorId) -> TensorId {
    if t.shape(x).len() == 1 {
        let c = t.shape(x)[0];
        let x2 = t.reshape(x, &[1, c]);
        let y = t.matmul(x2, w);
        let yb = t.add(y, bias);
        let out_c = t.shape(yb)[1];
        t.reshape(yb, &[out_c])
    } else {
        let y = t.matmul(x, w);
        t.add(y, bias)
    }
}

/// Scaled dot-product attention: queries `[B,S,C]` against keys/values
/// `[B,K,C]`, residual from the queries, post-norm. Also returns the
/// per-head attention weights (`[B,S,K]` each).
pub fn attend(t: &mut Tape, q_in: TensorId, kv: TensorId, p: &MhsaParams) -> (TensorId, Vec<TensorId>) {
    let c = *t.shape(q_in).last().unwrap();
    let d = c / p.heads;
    let q = t.matmul(q_in, p.wq);
    let k = t.matmul(kv, p.wk);
    let v = t.matmul(kv, p.wv);
    let axis = t.shape(q).len() - 1;
    let mut outs = Vec::with_capacity(p.heads);
    let mut weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = t.slice(q, axis, h * d, d);
        let kh = t.slice(k, axis, h * d, d);
        let vh = t.slice(v, axis, h * d, d);
        let kt = t.transpose_last2(kh);
        let logits = t.matmul(qh, kt);
        let scaled = t.scale(logits, 1.0 / (d as f64).sqrt());
        let attn = t.softmax(scaled, axis);
        weights.push(attn);
        outs.push(t.matmul(attn, vh));
    }
    let cat = t.concat(&outs, axis);
    let proj = t.matmul(cat, p.wo);
    let res = t.add(q_in, proj);
    (t.layer_norm(res, p.ln_gain, p.ln_bias, LAYER_NORM_EPS), weights)
}

/// Multi-head self-attention over a batch of sequences `[B,S,C]`.
pub fn mhsa_batched(t: &mut Tape, x: TensorId, p: &MhsaParams) -> TensorId {
    attend(t, x, x, p).0
}

/// Multi-head self-attention over one sequence `[S,C]`.
pub fn mhsa(t: &mut Tape, x: TensorId, p: &MhsaParams) -> TensorId {
    let sh = t.shape(x).to_vec();
    assert_eq!(sh.len(), 2, "mhsa expects [S,C], got {:?}", sh);
    let batched = t.reshape(x, &[1, sh[0], sh[1]]);
    let out = mhsa_batched(t, batched, p);
    t.reshape(out, &sh)
}

/// linear -> relu -> linear -> relu -> linear over the last axis.
pub fn mlp3(t: &mut Tape, x: TensorId, p: &Mlp3Params) -> TensorId {
    let h1 = linear(t, x, p.w1, p.b1);
    let a1 = t.relu(h1);
    let h2 = linear(t, a1, p.w2, p.b2);
    let a2 = t.relu(h2);
    linear(t, a2, p.w3, p.b3)
}

fn ffn_post(t: &mut Tape, x: TensorId, p: &FfnParams) -> TensorId {
    let h = linear(t, x, p.w1, p.b1);
    let a = t.relu(h);
    let y = linear(t, a, p.w2, p.b2);
    let res = t.add(x, y);
    t.layer_norm(res, p.ln_gain, p.ln_bias, LAYER_NORM_EPS)
}

/// One decoder block over a batch of frames: queries `[T,N,C]`, features
/// `[T,P,C]` (position encoding already applied by the caller).
pub fn detr_decode_batched(t: &mut Tape, q: TensorId, v: TensorId, p: &DetrLayerParams) -> TensorId {
    let sa = mhsa_batched(t, q, &p.self_attn);
    let (ca, _) = attend(t, sa, v, &p.cross);
    ffn_post(t, ca, &p.ffn)
}

/// One decoder block for a single frame: queries `[N,C]`, features `[P,C]`.
pub fn detr_decode_frame(t: &mut Tape, q: TensorId, v: TensorId, p: &DetrLayerParams) -> TensorId {
    let qs = t.shape(q).to_vec();
    let vs = t.shape(v).to_vec();
    assert_eq!(qs.len(), 2, "detr_decode_frame expects queries [N,C], got {:?}", qs);
    assert_eq!(qs[1], vs[1], "query width {} does not match feature width {}", qs[1], vs[1]);
    let qb = t.reshape(q, &[1, qs[0], qs[1]]);
    let vb = t.reshape(v, &[1, vs[0], vs[1]]);
    let out = detr_decode_batched(t, qb, vb, p);
    t.reshape(out, &qs)
}

/// 2-D sinusoidal position encoding for an `h x w` grid, flattened row-major
/// to `[h*w, c]`. First half of the channels encodes y, second half x.
pub fn sinusoidal_position_encoding_2d(h: usize, w: usize, c: usize) -> Vec<f64> {
    assert_eq!(c % 4, 0, "2-D sinusoidal encoding needs width divisible by 4, got {}", c);
    let half = c / 2;
    let pairs = half / 2;
    let mut pe = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * c;
            for i in 0..pairs {
                let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / half as f64);
                pe[base + 2 * i] = (y as f64 * freq).sin();
                pe[base + 2 * i + 1] = (y as f64 * freq).cos();
                pe[base + half + 2 * i] = (x as f64 * freq).sin();
                pe[base + half + 2 * i + 1] = (x as f64 * freq).cos();
            }
        }
    }
    pe
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::params::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_mhsa(t: &mut Tape, c: usize, heads: usize) -> MhsaParams {
        let mut eye = vec![0.0; c * c];
        for i in 0..c {
            eye[i * c + i] = 1.0;
        }
        MhsaParams {
            wq: t.constant(eye.clone(), &[c, c]),
            wk: t.constant(eye.clone(), &[c, c]),
            wv: t.constant(eye.clone(), &[c, c]),
            wo: t.constant(eye, &[c, c]),
            ln_gain: t.constant(vec![1.0; c], &[c]),
            ln_bias: t.constant(vec![0.0; c], &[c]),
            heads,
        }
    }

    fn random_mhsa(t: &mut Tape, c: usize, heads: usize, seed: u64) -> MhsaParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mat = |t: &mut Tape| {
            let data: Vec<f64> = (0..c * c).map(|_| rng.gen_range(-0.5..0.5)).collect();
            t.constant(data, &[c, c])
        };
        let wq = mat(t);
        let wk = mat(t);
        let wv = mat(t);
        let wo = mat(t);
        MhsaParams {
            wq,
            wk,
            wv,
            wo,
            ln_gain: t.constant(vec![1.0; c], &[c]),
            ln_bias: t.constant(vec![0.0; c], &[c]),
            heads,
        }
    }

    #[test]
    fn single_token_attention_weight_is_one_and_residual_doubles() {
        let c = 4;
        let mut t = Tape::new();
        let p = identity_mhsa(&mut t, c, 2);
        let x = t.constant(vec![0.5, -1.0, 2.0, 0.25], &[1, 1, c]);
        let (out, weights) = attend(&mut t, x, x, &p);
        for w in &weights {
            assert_eq!(t.data(*w), &[1.0]);
        }
        // Pre-norm value is exactly 2x, so the output is layer-norm of 2x.
        let two_x = t.constant(vec![1.0, -2.0, 4.0, 0.5], &[1, 1, c]);
        let g = t.constant(vec![1.0; c], &[c]);
        let b = t.constant(vec![0.0; c], &[c]);
        let expected = t.layer_norm(two_x, g, b, LAYER_NORM_EPS);
        assert_eq!(t.data(out), t.data(expected));
    }

    #[test]
    fn identical_tokens_get_identical_rows() {
        let c = 4;
        let mut t = Tape::new();
        let p = random_mhsa(&mut t, c, 2, 5);
        let row = vec![0.3, -0.7, 1.1, 0.2];
        let mut data = row.clone();
        data.extend_from_slice(&row);
        let x = t.constant(data, &[2, c]);
        let out = mhsa(&mut t, x, &p);
        let o = t.data(out);
        assert_eq!(&o[..c], &o[c..]);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut t = Tape::new();
        let c = 8;
        let p = random_mhsa(&mut t, c, 4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x: Vec<f64> = (0..5 * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xb = t.constant(x, &[1, 5, c]);
        let (_, weights) = attend(&mut t, xb, xb, &p);
        for w in weights {
            let sums = t.sum_axis(w, 2);
            for &s in t.data(sums) {
                assert!((s - 1.0).abs() < 1e-9, "attention row sum {}", s);
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        let c = 4;
        // Swapping two tokens is bit-exact (pairwise sums commute).
        let mut t = Tape::new();
        let p = random_mhsa(&mut t, c, 2, 8);
        let x = t.constant(vec![0.1, 0.4, -0.2, 0.9, -0.5, 0.3, 0.8, -0.1], &[2, c]);
        let xs = t.constant(vec![-0.5, 0.3, 0.8, -0.1, 0.1, 0.4, -0.2, 0.9], &[2, c]);
        let out = mhsa(&mut t, x, &p);
        let out_s = mhsa(&mut t, xs, &p);
        let (o, os) = (t.data(out), t.data(out_s));
        assert_eq!(&o[..c], &os[c..]);
        assert_eq!(&o[c..], &os[..c]);

        // A general permutation permutes the summation order inside softmax
        // and the value mix, so allow last-ulp drift.
        let mut t2 = Tape::new();
        let p2 = random_mhsa(&mut t2, c, 2, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let rows: Vec<Vec<f64>> = (0..4).map(|_| (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let perm = [2usize, 0, 3, 1];
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let permuted: Vec<f64> = perm.iter().flat_map(|&i| rows[i].clone()).collect();
        let x = t2.constant(flat, &[4, c]);
        let xp = t2.constant(permuted, &[4, c]);
        let out = mhsa(&mut t2, x, &p2);
        let out_p = mhsa(&mut t2, xp, &p2);
        for (r, &src) in perm.iter().enumerate() {
            for k in 0..c {
                let a = t2.data(out)[src * c + k];
                let b = t2.data(out_p)[r * c + k];
                assert!((a - b).abs() < 1e-12, "row {} ch {}: {} vs {}", r, k, a, b);
            }
        }
    }

    #[test]
    fn mlp3_zero_weights_zero_output() {
        let c = 3;
        let mut t = Tape::new();
        let zeros_m = t.constant(vec![0.0; c * c], &[c, c]);
        let zeros_v = t.constant(vec![0.0; c], &[c]);
        let p = Mlp3Params { w1: zeros_m, b1: zeros_v, w2: zeros_m, b2: zeros_v, w3: zeros_m, b3: zeros_v };
        let x = t.constant(vec![1.0, -2.0, 3.0], &[c]);
        let y = mlp3(&mut t, x, &p);
        assert_eq!(t.data(y), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn mlp3_identity_passthrough_on_nonnegative() {
        let c = 3;
        let mut t = Tape::new();
        let mut eye = vec![0.0; c * c];
        for i in 0..c {
            eye[i * c + i] = 1.0;
        }
        let eye_m = t.constant(eye, &[c, c]);
        let zeros_v = t.constant(vec![0.0; c], &[c]);
        let p = Mlp3Params { w1: eye_m, b1: zeros_v, w2: eye_m, b2: zeros_v, w3: eye_m, b3: zeros_v };
        let x = t.constant(vec![0.5, 0.0, 2.0], &[c]);
        let y = mlp3(&mut t, x, &p);
        assert_eq!(t.data(y), &[0.5, 0.0, 2.0]);
    }

    #[test]
    fn detr_cross_attention_peaks_on_matching_position() {
        let c = 4;
        let mut t = Tape::new();
        let p = identity_mhsa(&mut t, c, 1);
        let q = t.constant(vec![2.0, -1.0, 1.5, 0.5], &[1, 1, c]);
        // Position 2 equals the (scaled) query row; others are near zero.
        let mut v = vec![0.01; 4 * c];
        for (i, &val) in [2.0, -1.0, 1.5, 0.5].iter().enumerate() {
            v[2 * c + i] = val * 4.0;
        }
        let vb = t.constant(v, &[1, 4, c]);
        let (_, weights) = attend(&mut t, q, vb, &p);
        let w = t.data(weights[0]);
        let best = crate::tensor::argmax(w);
        assert_eq!(best, 2, "attention weights {:?}", w);
    }

    #[test]
    fn detr_position_permutation_invariance_without_encoding() {
        let c = 4;
        let n = 2;
        // P=2: swapping both positions is bit-exact.
        let mut t = Tape::new();
        let mut store = ParamStore::new(21);
        let mut b = Binder::new(&mut t, &mut store);
        let p = DetrLayerParams::bind(&mut b, "detr", c, 2, 2 * c);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let q: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..2 * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut v_swapped = v[c..].to_vec();
        v_swapped.extend_from_slice(&v[..c]);
        let qt = t.constant(q, &[n, c]);
        let vt = t.constant(v, &[2, c]);
        let vs = t.constant(v_swapped, &[2, c]);
        let out = detr_decode_frame(&mut t, qt, vt, &p);
        let out_s = detr_decode_frame(&mut t, qt, vs, &p);
        assert_eq!(t.data(out), t.data(out_s));

        // Larger P within last-ulp drift.
        let mut t2 = Tape::new();
        let mut store2 = ParamStore::new(23);
        let mut b2 = Binder::new(&mut t2, &mut store2);
        let p2 = DetrLayerParams::bind(&mut b2, "detr", c, 2, 2 * c);
        let q2: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v2: Vec<f64> = (0..5 * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let perm = [3usize, 0, 4, 2, 1];
        let v2p: Vec<f64> = perm.iter().flat_map(|&i| v2[i * c..(i + 1) * c].to_vec()).collect();
        let qt2 = t2.constant(q2, &[n, c]);
        let vt2 = t2.constant(v2, &[5, c]);
        let vp2 = t2.constant(v2p, &[5, c]);
        let out2 = detr_decode_frame(&mut t2, qt2, vt2, &p2);
        let out2p = detr_decode_frame(&mut t2, qt2, vp2, &p2);
        for (a, b) in t2.data(out2).iter().zip(t2.data(out2p)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn position_encoding_is_deterministic_and_bounded() {
        let pe = sinusoidal_position_encoding_2d(3, 4, 8);
        assert_eq!(pe.len(), 3 * 4 * 8);
        assert!(pe.iter().all(|v| v.abs() <= 1.0));
        assert_eq!(pe, sinusoidal_position_encoding_2d(3, 4, 8));
    }

    #[test]
    fn finite_difference_blocks() {
        for case in crate::gradcheck::block_cases() {
            let report = check_gradients(&case);
            assert!(
                report.max_rel_error < 1e-4,
                "{}: max rel error {:.3e} at {}",
                case.name,
                report.max_rel_error,
                report.worst_param
            );
        }
    }
}
