//! Central finite-difference verification of every differentiable operation.
//!
//! Each [`GradCheckCase`] owns its parameter data and a builder that replays
//! the forward graph from plain slices, so the numeric oracle (two forward
//! evaluations per perturbed element) never touches the backward rules it is
//! checking. Relative error uses `max(|analytic|, |numeric|, 1e-8)` as the
//! denominator; the pass threshold everywhere is `1e-4` at 64-bit.

use crate::tensor::{Tape, TensorId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const PASS_THRESHOLD: f64 = 1e-4;

type Builder = Box<dyn Fn(&mut Tape, &[Vec<f64>]) -> (TensorId, Vec<TensorId>) + Send + Sync>;

pub struct GradCheckCase {
    pub name: String,
    pub suite: &'static str,
    /// (name, shape, value) per differentiable input, in builder order.
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
    builder: Builder,
    pub corrupt_matmul: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub suite: &'static str,
    pub param_elements: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < PASS_THRESHOLD
    }
}

impl GradCheckCase {
    pub fn new(
        suite: &'static str,
        name: impl Into<String>,
        params: Vec<(String, Vec<usize>, Vec<f64>)>,
        builder: impl Fn(&mut Tape, &[Vec<f64>]) -> (TensorId, Vec<TensorId>) + Send + Sync + 'static,
    ) -> GradCheckCase {
        GradCheckCase {
            name: name.into(),
            suite,
            params,
            builder: Box::new(builder),
            corrupt_matmul: false,
        }
    }

    /// Negative control: a matmul whose backward rule is deliberately wrong.
    pub fn corrupted_matmul() -> GradCheckCase {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let a = rand_vec(&mut rng, 6, -1.0, 1.0);
        let b = rand_vec(&mut rng, 12, -1.0, 1.0);
        let mut case = GradCheckCase::new(
            "tensor",
            "matmul corrupted backward (negative control)",
            vec![
                ("a".into(), vec![2, 3], a),
                ("b".into(), vec![3, 4], b),
            ],
            |t, data| {
                let a = t.leaf(data[0].clone(), &[2, 3]);
                let b = t.leaf(data[1].clone(), &[3, 4]);
                let y = t.matmul(a, b);
                let sq = t.mul(y, y);
                (t.sum_all(sq), vec![a, b])
            },
        );
        case.corrupt_matmul = true;
        case
    }

    fn loss_value(&self, data: &[Vec<f64>]) -> f64 {
        let mut tape = Tape::new();
        let (loss, _) = (self.builder)(&mut tape, data);
        tape.data(loss)[0]
    }
}

/// Analytic-vs-central-difference comparison over every parameter element.
pub fn check_gradients(case: &GradCheckCase) -> GradCheckReport {
    let data: Vec<Vec<f64>> = case.params.iter().map(|(_, _, d)| d.clone()).collect();

    let mut tape = Tape::new();
    tape.corrupt_matmul_backward = case.corrupt_matmul;
    let (loss, leaves) = (case.builder)(&mut tape, &data);
    tape.backward(loss);
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|&id| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; tape.data(id).len()]))
        .collect();

    let mut max_rel = 0.0;
    let mut worst = String::new();
    let mut elements = 0;
    for (p, (pname, _, pdata)) in case.params.iter().enumerate() {
        for i in 0..pdata.len() {
            elements += 1;
            let mut plus = data.clone();
            plus[p][i] += FD_STEP;
            let mut minus = data.clone();
            minus[p][i] -= FD_STEP;
            let numeric = (case.loss_value(&plus) - case.loss_value(&minus)) / (2.0 * FD_STEP);
            let a = analytic[p][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{}[{}]", pname, i);
            }
        }
    }
    GradCheckReport {
        name: case.name.clone(),
        suite: case.suite,
        param_elements: elements,
        max_rel_error: max_rel,
        worst_param: worst,
    }
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Random values with magnitude bounded away from zero, for ops with kinks.
fn rand_vec_away_from_zero(rng: &mut ChaCha8Rng, n: usize, min_mag: f64, max_mag: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.gen_range(min_mag..max_mag)
        })
        .collect()
}

/// Finite-difference cases for the tensor module's op set, three random
/// shapes per op family.
pub fn core_op_cases() -> Vec<GradCheckCase> {
    let mut cases = Vec::new();
    let shapes: [(&[usize], &[usize]); 3] = [(&[3, 4], &[3, 4]), (&[2, 3, 4], &[4]), (&[3, 1], &[1, 4])];

    for (si, (sa, sb)) in shapes.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + si as u64);
        let na: usize = sa.iter().product();
        let nb: usize = sb.iter().product();
        let a = rand_vec(&mut rng, na, -1.5, 1.5);
        let b = rand_vec_away_from_zero(&mut rng, nb, 0.4, 1.6);
        let (sa_o, sb_o) = (sa.to_vec(), sb.to_vec());
        cases.push(GradCheckCase::new(
            "tensor",
            format!("elementwise add/sub/mul/div shapes {:?}x{:?}", sa, sb),
            vec![("a".into(), sa.to_vec(), a), ("b".into(), sb.to_vec(), b)],
            move |t, data| {
                let a = t.leaf(data[0].clone(), &sa_o);
                let b = t.leaf(data[1].clone(), &sb_o);
                let s = t.add(a, b);
                let d = t.sub(a, b);
                let m = t.mul(s, d);
                let q = t.div(m, b);
                let l = t.sum_all(q);
                (l, vec![a, b])
            },
        ));
    }

    for (si, shape) in [vec![5], vec![2, 3], vec![2, 2, 3]].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + si as u64);
        let n: usize = shape.iter().product();
        let x = rand_vec_away_from_zero(&mut rng, n, 0.2, 1.8);
        let sh = shape.clone();
        cases.push(GradCheckCase::new(
            "tensor",
            format!("unary relu/abs/sigmoid/softplus/exp chain shape {:?}", shape),
            vec![("x".into(), shape, x)],
            move |t, data| {
                let x = t.leaf(data[0].clone(), &sh);
                let r = t.relu(x);
                let ab = t.abs(x);
                let sg = t.sigmoid(x);
                let sp = t.softplus(x);
                let e = t.exp(sg);
                let total0 = t.add(r, ab);
                let total1 = t.add(total0, sp);
                let total2 = t.mul(total1, e);
                (t.sum_all(total2), vec![x])
            },
        ));
    }

    for (si, shape) in [vec![4], vec![3, 2], vec![2, 5]].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + si as u64);
        let n: usize = shape.iter().product();
        let x = rand_vec(&mut rng, n, 0.3, 2.0);
        let sh = shape.clone();
        cases.push(GradCheckCase::new(
            "tensor",
            format!("log/pow/scale chain shape {:?}", shape),
            vec![("x".into(), shape, x)],
            move |t, data| {
                let x = t.leaf(data[0].clone(), &sh);
                let lg = t.log(x);
                let pw = t.pow_const(x, 2.5);
                let sc = t.scale(lg, -0.7);
                let s = t.add(pw, sc);
                (t.sum_all(s), vec![x])
            },
        ));
    }

    // Spec case: random 3x4 by 4x2, plus batched and broadcast-batch forms.
    let matmul_shapes: [(Vec<usize>, Vec<usize>); 3] = [
        (vec![3, 4], vec![4, 2]),
        (vec![2, 3, 4], vec![4, 5]),
        (vec![2, 2, 3], vec![1, 3, 2]),
    ];
    for (si, (sa, sb)) in matmul_shapes.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + si as u64);
        let a = rand_vec(&mut rng, sa.iter().product(), -1.0, 1.0);
        let b = rand_vec(&mut rng, sb.iter().product(), -1.0, 1.0);
        let (sa_o, sb_o) = (sa.clone(), sb.clone());
        cases.push(GradCheckCase::new(
            "tensor",
            format!("matmul {:?} x {:?}", sa, sb),
            vec![("a".into(), sa, a), ("b".into(), sb, b)],
            move |t, data| {
                let a = t.leaf(data[0].clone(), &sa_o);
                let b = t.leaf(data[1].clone(), &sb_o);
                let y = t.matmul(a, b);
                let sq = t.mul(y, y);
                (t.sum_all(sq), vec![a, b])
            },
        ));
    }

    // Spec case: softmax([0.3, -1.2, 2.0]) plus two batched axes.
    let softmax_cases: [(Vec<usize>, usize, u64); 3] =
        [(vec![3], 0, 500), (vec![2, 4], 1, 501), (vec![2, 3, 2], 1, 502)];
    for (shape, axis, seed) in softmax_cases {
        let data = if shape == [3] {
            vec![0.3, -1.2, 2.0]
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand_vec(&mut rng, shape.iter().product(), -2.0, 2.0)
        };
        let sh = shape.clone();
        cases.push(GradCheckCase::new(
            "tensor",
            format!("softmax shape {:?} axis {}", shape, axis),
            vec![("x".into(), shape, data)],
            move |t, data| {
                let x = t.leaf(data[0].clone(), &sh);
                let s = t.softmax(x, axis);
                let w: Vec<f64> = (0..t.data(s).len()).map(|i| 0.3 + 0.1 * i as f64).collect();
                let n = t.data(s).len();
                let weights = t.constant(w, &[n]);
                let flat = t.reshape(s, &[n]);
                let weighted = t.mul(flat, weights);
                (t.sum_all(weighted), vec![x])
            },
        ));
    }

    // Spec case: layer_norm on a random 4-vector, plus batched shapes.
    for (si, shape) in [vec![4], vec![3, 5], vec![2, 2, 6]].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + si as u64);
        let c = *shape.last().unwrap();
        let n: usize = shape.iter().product();
        let x = rand_vec(&mut rng, n, -2.0, 2.0);
        let gain = rand_vec(&mut rng, c, 0.5, 1.5);
        let bias = rand_vec(&mut rng, c, -0.5, 0.5);
        let sh = shape.clone();
        cases.push(GradCheckCase::new(
            "tensor",
            format!("layer_norm shape {:?}", shape),
            vec![
                ("x".into(), shape, x),
                ("gain".into(), vec![c], gain),
                ("bias".into(), vec![c], bias),
            ],
            move |t, data| {
                let c = data[1].len();
                let x = t.leaf(data[0].clone(), &sh);
                let g = t.leaf(data[1].clone(), &[c]);
                let b = t.leaf(data[2].clone(), &[c]);
                let y = t.layer_norm(x, g, b, 1e-5);
                let sq = t.mul(y, y);
                (t.sum_all(sq), vec![x, g, b])
            },
        ));
    }

    for (si, c) in [3usize, 5, 8].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + si as u64);
        let a = rand_vec(&mut rng, c, -1.5, 1.5);
        let b = rand_vec(&mut rng, c, -1.5, 1.5);
        cases.push(GradCheckCase::new(
            "tensor",
            format!("cosine_sim length {}", c),
            vec![("a".into(), vec![c], a), ("b".into(), vec![c], b)],
            move |t, data| {
                let c = data[0].len();
                let a = t.leaf(data[0].clone(), &[c]);
                let b = t.leaf(data[1].clone(), &[c]);
                let s = t.cosine_sim(a, b, 1e-8);
                (s, vec![a, b])
            },
        ));
    }

    for (si, (rows, cols)) in [(4usize, 3usize), (5, 2), (3, 6)].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + si as u64);
        let x = rand_vec(&mut rng, rows * cols, -1.0, 1.0);
        let idx: Vec<usize> = (0..rows + 1).map(|_| rng.gen_range(0..rows)).collect();
        cases.push(GradCheckCase::new(
            "tensor",
            format!("gather/concat/sum composite {}x{}", rows, cols),
            vec![("x".into(), vec![rows, cols], x)],
            move |t, data| {
                let x = t.leaf(data[0].clone(), &[rows, cols]);
                let g = t.gather(x, 0, &idx);
                let tp = t.transpose_last2(x);
                let tpt = t.transpose_last2(tp);
                let cat = t.concat(&[g, tpt], 0);
                let summed = t.sum_axis(cat, 0);
                let sq = t.mul(summed, summed);
                (t.sum_all(sq), vec![x])
            },
        ));
    }

    for (si, (a_b, ties)) in [((4usize, 3usize), false), ((6, 2), false), ((2, 5), false)].into_iter().enumerate()
    {
        let _ = ties;
        let (m, n) = a_b;
        let mut rng = ChaCha8Rng::seed_from_u64(900 + si as u64);
        // Keep |a-b| away from the tie so the subgradient branch is stable.
        let a: Vec<f64> = rand_vec(&mut rng, m * n, -1.0, 1.0);
        let b: Vec<f64> = a.iter().map(|v| v + if v > &0.0 { 0.5 } else { -0.5 }).collect();
        cases.push(GradCheckCase::new(
            "tensor",
            format!("minimum/maximum {}x{}", m, n),
            vec![("a".into(), vec![m, n], a), ("b".into(), vec![m, n], b)],
            move |t, data| {
                let a = t.leaf(data[0].clone(), &[m, n]);
                let b = t.leaf(data[1].clone(), &[m, n]);
                let mn = t.minimum(a, b);
                let mx = t.maximum(a, b);
                let s = t.add(mn, mx);
                let sq = t.mul(s, s);
                (t.sum_all(sq), vec![a, b])
            },
        ));
    }

    cases
}

/// Finite-difference cases for the attention blocks.
pub fn block_cases() -> Vec<GradCheckCase> {
    use crate::blocks::{self, DetrLayerParams, FfnParams, MhsaParams, Mlp3Params};
    let mut cases = Vec::new();

    // mhsa, S=3 C=4: gradient of sum(mhsa(x)) wrt x and all projections.
    {
        let (s, c, heads) = (3usize, 4usize, 2usize);
        let mut rng = ChaCha8Rng::seed_from_u64(1000);
        let mut params = vec![("x".to_string(), vec![s, c], rand_vec(&mut rng, s * c, -1.0, 1.0))];
        for name in ["wq", "wk", "wv", "wo"] {
            params.push((name.to_string(), vec![c, c], rand_vec(&mut rng, c * c, -0.6, 0.6)));
        }
        params.push(("ln_gain".to_string(), vec![c], rand_vec(&mut rng, c, 0.6, 1.4)));
        params.push(("ln_bias".to_string(), vec![c], rand_vec(&mut rng, c, -0.3, 0.3)));
        cases.push(GradCheckCase::new(
            "blocks",
            "mhsa S=3 C=4",
            params,
            move |t, data| {
                let x = t.leaf(data[0].clone(), &[s, c]);
                let p = MhsaParams {
                    wq: t.leaf(data[1].clone(), &[c, c]),
                    wk: t.leaf(data[2].clone(), &[c, c]),
                    wv: t.leaf(data[3].clone(), &[c, c]),
                    wo: t.leaf(data[4].clone(), &[c, c]),
                    ln_gain: t.leaf(data[5].clone(), &[c]),
                    ln_bias: t.leaf(data[6].clone(), &[c]),
                    heads,
                };
                let out = blocks::mhsa(t, x, &p);
                let loss = t.sum_all(out);
                (loss, vec![x, p.wq, p.wk, p.wv, p.wo, p.ln_gain, p.ln_bias])
            },
        ));
    }

    // mlp3 on a random input; inputs kept away from the relu kink.
    {
        let (c, hidden) = (4usize, 5usize);
        let mut rng = ChaCha8Rng::seed_from_u64(1100);
        let params = vec![
            ("x".to_string(), vec![2, c], rand_vec(&mut rng, 2 * c, -1.0, 1.0)),
            ("w1".to_string(), vec![c, hidden], rand_vec(&mut rng, c * hidden, -0.7, 0.7)),
            ("b1".to_string(), vec![hidden], rand_vec(&mut rng, hidden, 0.3, 0.8)),
            ("w2".to_string(), vec![hidden, hidden], rand_vec(&mut rng, hidden * hidden, -0.7, 0.7)),
            ("b2".to_string(), vec![hidden], rand_vec(&mut rng, hidden, 0.3, 0.8)),
            ("w3".to_string(), vec![hidden, c], rand_vec(&mut rng, hidden * c, -0.7, 0.7)),
            ("b3".to_string(), vec![c], rand_vec(&mut rng, c, -0.3, 0.3)),
        ];
        cases.push(GradCheckCase::new(
            "blocks",
            "mlp3 C=4 H=5",
            params,
            move |t, data| {
                let x = t.leaf(data[0].clone(), &[2, c]);
                let p = Mlp3Params {
                    w1: t.leaf(data[1].clone(), &[c, hidden]),
                    b1: t.leaf(data[2].clone(), &[hidden]),
                    w2: t.leaf(data[3].clone(), &[hidden, hidden]),
                    b2: t.leaf(data[4].clone(), &[hidden]),
                    w3: t.leaf(data[5].clone(), &[hidden, c]),
                    b3: t.leaf(data[6].clone(), &[c]),
                };
                let y = blocks::mlp3(t, x, &p);
                let sq = t.mul(y, y);
                let loss = t.sum_all(sq);
                (loss, vec![x, p.w1, p.b1, p.w2, p.b2, p.w3, p.b3])
            },
        ));
    }

    // One full DETR block, N=2 P=4 C=4.
    {
        let (n, pp, c, heads, hidden) = (2usize, 4usize, 4usize, 2usize, 8usize);
        let mut rng = ChaCha8Rng::seed_from_u64(1200);
        let mut params = vec![
            ("q".to_string(), vec![n, c], rand_vec(&mut rng, n * c, -1.0, 1.0)),
            ("v".to_string(), vec![pp, c], rand_vec(&mut rng, pp * c, -1.0, 1.0)),
        ];
        for block in ["self", "cross"] {
            for name in ["wq", "wk", "wv", "wo"] {
                params.push((format!("{block}.{name}"), vec![c, c], rand_vec(&mut rng, c * c, -0.6, 0.6)));
            }
            params.push((format!("{block}.ln_gain"), vec![c], rand_vec(&mut rng, c, 0.6, 1.4)));
            params.push((format!("{block}.ln_bias"), vec![c], rand_vec(&mut rng, c, -0.3, 0.3)));
        }
        params.push(("ffn.w1".to_string(), vec![c, hidden], rand_vec(&mut rng, c * hidden, -0.6, 0.6)));
        params.push(("ffn.b1".to_string(), vec![hidden], rand_vec(&mut rng, hidden, 0.3, 0.8)));
        params.push(("ffn.w2".to_string(), vec![hidden, c], rand_vec(&mut rng, hidden * c, -0.6, 0.6)));
        params.push(("ffn.b2".to_string(), vec![c], rand_vec(&mut rng, c, -0.3, 0.3)));
        params.push(("ffn.ln_gain".to_string(), vec![c], rand_vec(&mut rng, c, 0.6, 1.4)));
        params.push(("ffn.ln_bias".to_string(), vec![c], rand_vec(&mut rng, c, -0.3, 0.3)));
        cases.push(GradCheckCase::new(
            "blocks",
            "detr block N=2 P=4 C=4",
            params,
            move |t, data| {
                let q = t.leaf(data[0].clone(), &[n, c]);
                let v = t.leaf(data[1].clone(), &[pp, c]);
                let mut leaves = vec![q, v];
                let mut k = 2;
                let take_mhsa = |t: &mut Tape, leaves: &mut Vec<TensorId>, k: &mut usize| {
                    let p = MhsaParams {
                        wq: t.leaf(data[*k].clone(), &[c, c]),
                        wk: t.leaf(data[*k + 1].clone(), &[c, c]),
                        wv: t.leaf(data[*k + 2].clone(), &[c, c]),
                        wo: t.leaf(data[*k + 3].clone(), &[c, c]),
                        ln_gain: t.leaf(data[*k + 4].clone(), &[c]),
                        ln_bias: t.leaf(data[*k + 5].clone(), &[c]),
                        heads,
                    };
                    *k += 6;
                    leaves.extend([p.wq, p.wk, p.wv, p.wo, p.ln_gain, p.ln_bias]);
                    p
                };
                let self_attn = take_mhsa(t, &mut leaves, &mut k);
                let cross = take_mhsa(t, &mut leaves, &mut k);
                let ffn = FfnParams {
                    w1: t.leaf(data[k].clone(), &[c, hidden]),
                    b1: t.leaf(data[k + 1].clone(), &[hidden]),
                    w2: t.leaf(data[k + 2].clone(), &[hidden, c]),
                    b2: t.leaf(data[k + 3].clone(), &[c]),
                    ln_gain: t.leaf(data[k + 4].clone(), &[c]),
                    ln_bias: t.leaf(data[k + 5].clone(), &[c]),
                };
                leaves.extend([ffn.w1, ffn.b1, ffn.w2, ffn.b2, ffn.ln_gain, ffn.ln_bias]);
                let p = DetrLayerParams { self_attn, cross, ffn };
                let out = blocks::detr_decode_frame(t, q, v, &p);
                let sq = t.mul(out, out);
                let loss = t.sum_all(sq);
                (loss, leaves)
            },
        ));
    }

    cases
}

/// Runs `bind` against a throwaway tape to learn which parameters a model
/// fragment creates, in order, with their initial values.
pub fn discover_params(
    seed: u64,
    bind: impl Fn(&mut crate::params::Binder),
) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut store = crate::params::ParamStore::new(seed);
    let mut tape = Tape::new();
    let mut binder = crate::params::Binder::new(&mut tape, &mut store);
    bind(&mut binder);
    store.entries().iter().map(|e| (e.name.clone(), e.shape.clone(), e.data.clone())).collect()
}

/// Finite-difference cases for the collection-distribution decoder. The
/// whole-stack cases run with relaxed selection so the loss is differentiable
/// end to end; the straight-through estimator itself is verified by the
/// dedicated Jacobian test against the relaxed path.
pub fn decoder_cases() -> Vec<GradCheckCase> {
    use crate::blocks::{LnParams, Mlp3Params};
    use crate::decoder::{self, SelectionKind, TempCdLayerParams};
    use crate::params::{Binder, ParamStore};
    let mut cases = Vec::new();

    // Motion collection: gates and gated sum, wrt decoded queries and W.
    {
        let (frames, n, c) = (3usize, 2usize, 4usize);
        let mut rng = ChaCha8Rng::seed_from_u64(2000);
        let params = vec![
            ("decoded".to_string(), vec![frames, n, c], rand_vec(&mut rng, frames * n * c, -1.0, 1.0)),
            ("gate_w".to_string(), vec![c, 1], rand_vec(&mut rng, c, -1.0, 1.0)),
        ];
        cases.push(GradCheckCase::new(
            "decoder",
            "collect_motions T=3 N=2 C=4",
            params,
            move |t, data| {
                let decoded = t.leaf(data[0].clone(), &[frames, n, c]);
                let w = t.leaf(data[1].clone(), &[c, 1]);
                let (gates, motions) = decoder::collect_motions(t, decoded, w);
                let msq = t.mul(motions, motions);
                let mloss = t.sum_all(msq);
                let weights: Vec<f64> = (0..frames * n).map(|i| 0.2 + 0.13 * i as f64).collect();
                let wts = t.constant(weights, &[frames, n, 1]);
                let gw = t.mul(gates, wts);
                let gloss = t.sum_all(gw);
                let loss = t.add(mloss, gloss);
                (loss, vec![decoded, w])
            },
        ));
    }

    // Scores through token update on the relaxed path.
    {
        let (n, c, hidden) = (3usize, 4usize, 6usize);
        let mut rng = ChaCha8Rng::seed_from_u64(2100);
        let params = vec![
            ("motions".to_string(), vec![n, c], rand_vec(&mut rng, n * c, -1.0, 1.0)),
            ("fs".to_string(), vec![c], rand_vec(&mut rng, c, -1.0, 1.0)),
            ("prev".to_string(), vec![c], rand_vec(&mut rng, c, -1.0, 1.0)),
            ("w1".to_string(), vec![c, hidden], rand_vec(&mut rng, c * hidden, -0.6, 0.6)),
            ("b1".to_string(), vec![hidden], rand_vec(&mut rng, hidden, 0.2, 0.7)),
            ("w2".to_string(), vec![hidden, hidden], rand_vec(&mut rng, hidden * hidden, -0.6, 0.6)),
            ("b2".to_string(), vec![hidden], rand_vec(&mut rng, hidden, 0.2, 0.7)),
            ("w3".to_string(), vec![hidden, c], rand_vec(&mut rng, hidden * c, -0.6, 0.6)),
            ("b3".to_string(), vec![c], rand_vec(&mut rng, c, -0.3, 0.3)),
            ("ln_gain".to_string(), vec![c], rand_vec(&mut rng, c, 0.6, 1.4)),
            ("ln_bias".to_string(), vec![c], rand_vec(&mut rng, c, -0.3, 0.3)),
        ];
        cases.push(GradCheckCase::new(
            "decoder",
            "scores through update, relaxed path",
            params,
            move |t, data| {
                let motions = t.leaf(data[0].clone(), &[n, c]);
                let fs = t.leaf(data[1].clone(), &[c]);
                let prev = t.leaf(data[2].clone(), &[c]);
                let mlp = Mlp3Params {
                    w1: t.leaf(data[3].clone(), &[c, hidden]),
                    b1: t.leaf(data[4].clone(), &[hidden]),
                    w2: t.leaf(data[5].clone(), &[hidden, hidden]),
                    b2: t.leaf(data[6].clone(), &[hidden]),
                    w3: t.leaf(data[7].clone(), &[hidden, c]),
                    b3: t.leaf(data[8].clone(), &[c]),
                };
                let ln = LnParams { gain: t.leaf(data[9].clone(), &[c]), bias: t.leaf(data[10].clone(), &[c]) };
                let (_, _, sel) =
                    decoder::select_referent(t, motions, fs, 0.9, None, SelectionKind::Relaxed);
                let token = decoder::update_referent_token(t, sel, motions, prev, &mlp, &ln);
                let sq = t.mul(token, token);
                let loss = t.sum_all(sq);
                (
                    loss,
                    vec![motions, fs, prev, mlp.w1, mlp.b1, mlp.w2, mlp.b2, mlp.w3, mlp.b3, ln.gain, ln.bias],
                )
            },
        ));
    }

    // Whole layers, relaxed selection, every parameter plus the inputs.
    for (name, layers, frames, n, c, p, seed) in [
        ("full layer L=1 T=2 N=2 C=4 P=4, relaxed", 1usize, 2usize, 2usize, 4usize, 4usize, 2200u64),
        ("full stack L=2 T=3 N=2 C=8 P=4, relaxed", 2, 3, 2, 8, 4, 2300),
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![
            ("input.fs".to_string(), vec![c], rand_vec(&mut rng, c, -1.0, 1.0)),
            ("input.slots".to_string(), vec![n, c], rand_vec(&mut rng, n * c, -1.0, 1.0)),
            ("input.fused".to_string(), vec![frames, p, c], rand_vec(&mut rng, frames * p * c, -1.0, 1.0)),
        ];
        let model_params = discover_params(seed + 1, |b| {
            for l in 0..layers {
                TempCdLayerParams::bind(b, &format!("layer.{l}"), c, 2, 2 * c, frames);
            }
        });
        params.extend(model_params);
        let entries_meta: Vec<(String, Vec<usize>)> =
            params[3..].iter().map(|(nm, sh, _)| (nm.clone(), sh.clone())).collect();
        cases.push(GradCheckCase::new(
            "decoder",
            name,
            params,
            move |t, data| {
                let fs = t.leaf(data[0].clone(), &[c]);
                let slots = t.leaf(data[1].clone(), &[n, c]);
                let fused = t.leaf(data[2].clone(), &[frames, p, c]);
                let entries: Vec<(String, Vec<usize>, Vec<f64>)> = entries_meta
                    .iter()
                    .zip(&data[3..])
                    .map(|((nm, sh), d)| (nm.clone(), sh.clone(), d.clone()))
                    .collect();
                let mut store = ParamStore::from_entries(entries);
                let mut binder = Binder::new(t, &mut store);
                let layer_params: Vec<TempCdLayerParams> = (0..layers)
                    .map(|l| TempCdLayerParams::bind(&mut binder, &format!("layer.{l}"), c, 2, 2 * c, frames))
                    .collect();
                let bound: Vec<_> = binder.bound().iter().map(|&(_, id)| id).collect();
                let t = binder.tape;
                let mut state = decoder::init_state(t, fs, slots, frames);
                for lp in &layer_params {
                    let (next, _, _) =
                        decoder::run_layer(t, &state, fused, lp, fs, 0.9, None, SelectionKind::Relaxed, false);
                    state = next;
                }
                // Weighted linear readout: a sum of squares of layer-normed
                // outputs is constant by construction, so probe with fixed
                // random weights instead.
                let nq = t.data(state.queries).len();
                let wq: Vec<f64> = (0..nq).map(|i| ((i * 2654435761) % 97) as f64 / 97.0 - 0.5).collect();
                let wq_t = t.constant(wq, &[frames, n, c]);
                let q_w = t.mul(state.queries, wq_t);
                let q_loss = t.sum_all(q_w);
                let wr: Vec<f64> = (0..c).map(|i| ((i * 40503) % 89) as f64 / 89.0 - 0.5).collect();
                let wr_t = t.constant(wr, &[c]);
                let r_w = t.mul(state.referent_token, wr_t);
                let r_loss = t.sum_all(r_w);
                let loss = t.add(q_loss, r_loss);
                let mut leaves = vec![fs, slots, fused];
                leaves.extend(bound);
                (loss, leaves)
            },
        ));
    }

    cases
}

/// Finite-difference cases for the prediction heads and losses.
pub fn head_cases() -> Vec<GradCheckCase> {
    use crate::blocks::Mlp3Params;
    use crate::heads;
    let mut cases = Vec::new();

    // Segmentation head into dice+focal, T=1 P=4 C=4.
    {
        let (frames, fh, fw, c) = (1usize, 2usize, 2usize, 4usize);
        let p = fh * fw;
        let mut rng = ChaCha8Rng::seed_from_u64(3000);
        let gt: Vec<f64> = (0..frames * p).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let params = vec![
            ("referent".to_string(), vec![frames, c], rand_vec(&mut rng, frames * c, -1.0, 1.0)),
            ("fused".to_string(), vec![frames, p, c], rand_vec(&mut rng, frames * p * c, -1.0, 1.0)),
            ("seg_q_w".to_string(), vec![c, c], rand_vec(&mut rng, c * c, -0.7, 0.7)),
            ("seg_q_b".to_string(), vec![c], rand_vec(&mut rng, c, -0.3, 0.3)),
            ("seg_v_w".to_string(), vec![c, c], rand_vec(&mut rng, c * c, -0.7, 0.7)),
            ("seg_v_b".to_string(), vec![c], rand_vec(&mut rng, c, -0.3, 0.3)),
        ];
        cases.push(GradCheckCase::new(
            "heads",
            "segmentation head + dice/focal, T=1 P=4 C=4",
            params,
            move |t, data| {
                let referent = t.leaf(data[0].clone(), &[frames, c]);
                let fused = t.leaf(data[1].clone(), &[frames, p, c]);
                let seg_q_w = t.leaf(data[2].clone(), &[c, c]);
                let seg_q_b = t.leaf(data[3].clone(), &[c]);
                let seg_v_w = t.leaf(data[4].clone(), &[c, c]);
                let seg_v_b = t.leaf(data[5].clone(), &[c]);
                let pq = crate::blocks::linear(t, referent, seg_q_w, seg_q_b);
                let pv = crate::blocks::linear(t, fused, seg_v_w, seg_v_b);
                let pq_col = t.reshape(pq, &[frames, c, 1]);
                let prod = t.matmul(pv, pq_col);
                let scaled = t.scale(prod, 1.0 / (c as f64).sqrt());
                let logits = t.reshape(scaled, &[frames, fh, fw]);
                let gt_t = t.constant(gt.clone(), &[frames, fh, fw]);
                let prob = t.sigmoid(logits);
                let d = heads::dice_loss(t, prob, gt_t, 1.0);
                let f = heads::focal_loss(t, logits, gt_t, 0.25, 2.0);
                let loss = t.add(d, f);
                (loss, vec![referent, fused, seg_q_w, seg_q_b, seg_v_w, seg_v_b])
            },
        ));
    }

    // Box head into GIoU + L1.
    {
        let (frames, c, hidden) = (2usize, 4usize, 6usize);
        let mut rng = ChaCha8Rng::seed_from_u64(3100);
        let gt = vec![0.42, 0.58, 0.31, 0.27, 0.66, 0.39, 0.22, 0.44];
        let params = vec![
            ("referent".to_string(), vec![frames, c], rand_vec(&mut rng, frames * c, -1.0, 1.0)),
            ("w1".to_string(), vec![c, hidden], rand_vec(&mut rng, c * hidden, -0.6, 0.6)),
            ("b1".to_string(), vec![hidden], rand_vec(&mut rng, hidden, 0.2, 0.7)),
            ("w2".to_string(), vec![hidden, hidden], rand_vec(&mut rng, hidden * hidden, -0.6, 0.6)),
            ("b2".to_string(), vec![hidden], rand_vec(&mut rng, hidden, 0.2, 0.7)),
            ("w3".to_string(), vec![hidden, 4], rand_vec(&mut rng, hidden * 4, -0.6, 0.6)),
            ("b3".to_string(), vec![4], rand_vec(&mut rng, 4, -0.3, 0.3)),
        ];
        cases.push(GradCheckCase::new(
            "heads",
            "box head + giou/l1, T=2 C=4",
            params,
            move |t, data| {
                let referent = t.leaf(data[0].clone(), &[frames, c]);
                let mlp = Mlp3Params {
                    w1: t.leaf(data[1].clone(), &[c, hidden]),
                    b1: t.leaf(data[2].clone(), &[hidden]),
                    w2: t.leaf(data[3].clone(), &[hidden, hidden]),
                    b2: t.leaf(data[4].clone(), &[hidden]),
                    w3: t.leaf(data[5].clone(), &[hidden, 4]),
                    b3: t.leaf(data[6].clone(), &[4]),
                };
                let boxes = heads::box_head(t, referent, &mlp);
                let gt_t = t.constant(gt.clone(), &[frames, 4]);
                let g = heads::giou_loss(t, boxes, gt_t);
                let l = heads::l1_loss(t, boxes, gt_t);
                let loss = t.add(g, l);
                (loss, vec![referent, mlp.w1, mlp.b1, mlp.w2, mlp.b2, mlp.w3, mlp.b3])
            },
        ));
    }

    // Focal loss alone over a logit grid.
    {
        let (frames, fh, fw) = (2usize, 3usize, 3usize);
        let mut rng = ChaCha8Rng::seed_from_u64(3200);
        let gt: Vec<f64> = (0..frames * fh * fw).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
        let logits = rand_vec(&mut rng, frames * fh * fw, -2.0, 2.0);
        cases.push(GradCheckCase::new(
            "heads",
            "focal loss T=2 3x3",
            vec![("logits".to_string(), vec![frames, fh, fw], logits)],
            move |t, data| {
                let logits = t.leaf(data[0].clone(), &[frames, fh, fw]);
                let gt_t = t.constant(gt.clone(), &[frames, fh, fw]);
                let loss = heads::focal_loss(t, logits, gt_t, 0.25, 2.0);
                (loss, vec![logits])
            },
        ));
    }

    cases
}

/// Finite-difference case for the multimodal fusion front end.
pub fn fusion_cases() -> Vec<GradCheckCase> {
    use crate::episodes::{self, Difficulty, FusionParams};
    let (c, patch, frames_len, h, w) = (8usize, 2usize, 2usize, 8usize, 8usize);
    let k = patch * patch * 3;
    let ep = episodes::generate_episode(5, Difficulty::Appearance, frames_len, h, w, 2)
        .expect("fusion gradcheck episode");
    let frames = ep.frames.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(4000);
    let params = vec![
        ("fs".to_string(), vec![c], rand_vec(&mut rng, c, -1.0, 1.0)),
        ("patch_w".to_string(), vec![k, c], rand_vec(&mut rng, k * c, -0.6, 0.6)),
        ("patch_b".to_string(), vec![c], rand_vec(&mut rng, c, -0.3, 0.3)),
        ("gate_w".to_string(), vec![c, c], rand_vec(&mut rng, c * c, -0.6, 0.6)),
        ("gate_b".to_string(), vec![c], rand_vec(&mut rng, c, -0.3, 0.3)),
    ];
    vec![GradCheckCase::new(
        "fusion",
        "patch embedding + sentence gate, T=2 8x8",
        params,
        move |t, data| {
            let fs = t.leaf(data[0].clone(), &[c]);
            let p = FusionParams {
                patch_w: t.leaf(data[1].clone(), &[k, c]),
                patch_b: t.leaf(data[2].clone(), &[c]),
                gate_w: t.leaf(data[3].clone(), &[c, c]),
                gate_b: t.leaf(data[4].clone(), &[c]),
            };
            let fused = episodes::fuse_features(t, &frames, frames_len, h, w, patch, fs, &p);
            let n = t.data(fused).len();
            let wts: Vec<f64> = (0..n).map(|i| ((i * 2654435761) % 101) as f64 / 101.0 - 0.5).collect();
            let sh = t.shape(fused).to_vec();
            let w_t = t.constant(wts, &sh);
            let prod = t.mul(fused, w_t);
            let loss = t.sum_all(prod);
            (loss, vec![fs, p.patch_w, p.patch_b, p.gate_w, p.gate_b])
        },
    )]
}

/// Every registered finite-difference suite, grouped for the CLI table.
pub fn all_cases() -> Vec<GradCheckCase> {
    let mut cases = core_op_cases();
    cases.extend(block_cases());
    cases.extend(decoder_cases());
    cases.extend(head_cases());
    cases.extend(fusion_cases());
    cases
}
