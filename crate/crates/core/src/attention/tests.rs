use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Tensor;
use crate::nn::{param_grad_check, Mode};

fn leaky(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.01 * v
    }
}

fn rand_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn set(store: &mut ParamStore, id: ParamId, rows: &[Vec<f64>]) {
    store.get_mut(id).value = Tensor::from_rows(rows).unwrap();
}

fn zero(store: &mut ParamStore, ids: &[ParamId]) {
    for &id in ids {
        let p = store.get_mut(id);
        p.value = Tensor::zeros(p.value.shape());
    }
}

/// `row · M` for a row vector and a row-major matrix.
fn vec_mat(x: &[f64], m: &Tensor) -> Vec<f64> {
    let (r, c) = m.dims2().unwrap();
    assert_eq!(x.len(), r);
    (0..c)
        .map(|j| (0..r).map(|i| x[i] * m.get2(i, j)).sum())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Literal scalar evaluation of the coefficient formula for one head.
fn oracle_alpha(x: &[Vec<f64>], w: &Tensor, a: &[f64], valid: &[bool]) -> Vec<Vec<f64>> {
    let dh = w.cols();
    let z: Vec<Vec<f64>> = x.iter().map(|xi| vec_mat(xi, w)).collect();
    let score = |i: usize, j: usize| {
        let cat: Vec<f64> = z[i].iter().chain(&z[j]).copied().collect();
        assert_eq!(cat.len(), 2 * dh);
        leaky(dot(a, &cat)).exp()
    };
    (0..x.len())
        .map(|i| {
            let denom: f64 = (0..x.len())
                .filter(|&m| valid[m])
                .map(|m| score(i, m))
                .sum();
            (0..x.len())
                .map(|j| if valid[j] { score(i, j) / denom } else { 0.0 })
                .collect()
        })
        .collect()
}

fn nodes(s: &mut Session<'_>, rows: &[Vec<f64>]) -> Var {
    s.tape.constant(Tensor::from_rows(rows).unwrap())
}

fn graph_attn(dim: usize, heads: usize, seed: u64) -> (ParamStore, GraphAttention) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ga = GraphAttention::new(
        &mut store,
        &mut rng,
        "ga",
        AttentionDims::new(dim, heads).unwrap(),
    )
    .unwrap();
    (store, ga)
}

#[test]
fn single_node_coefficient_is_one() {
    let (store, ga) = graph_attn(4, 2, 0);
    let mut s = Session::eval(&store);
    let x = nodes(&mut s, &[vec![0.3, -0.2, 1.0, 0.5]]);
    for a in ga.coefficients(&mut s, x, &NodeMask::all(1)).unwrap() {
        assert_eq!(s.tape.value(a).data(), &[1.0]);
    }
}

#[test]
fn identical_nodes_get_uniform_coefficients() {
    let (store, ga) = graph_attn(4, 2, 1);
    let mut s = Session::eval(&store);
    let row = vec![0.3, -0.2, 1.0, 0.5];
    let x = nodes(&mut s, &[row.clone(), row.clone(), row]);
    for a in ga.coefficients(&mut s, x, &NodeMask::all(3)).unwrap() {
        for &v in s.tape.value(a).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }
}

#[test]
fn coefficients_match_literal_formula() {
    let (mut store, ga) = graph_attn(2, 1, 2);
    let w = vec![vec![0.5, -1.0], vec![2.0, 0.25]];
    let a = [0.7, -0.3, 0.2, 1.1];
    set(&mut store, ga.transforms[0], &w);
    set(
        &mut store,
        ga.attention[0],
        &a.iter().map(|&v| vec![v]).collect::<Vec<_>>(),
    );
    let x = vec![vec![1.0, 0.0], vec![-0.5, 2.0], vec![0.3, 0.3]];
    for valid in [[true, true, true], [true, false, true]] {
        let expect = oracle_alpha(&x, &Tensor::from_rows(&w).unwrap(), &a, &valid);
        let mut s = Session::eval(&store);
        let xv = nodes(&mut s, &x);
        let alpha = ga
            .coefficients(&mut s, xv, &NodeMask::new(valid.to_vec()).unwrap())
            .unwrap();
        let got = s.tape.value(alpha[0]);
        for i in 0..3 {
            for j in 0..3 {
                assert!((got.get2(i, j) - expect[i][j]).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn message_passing_matches_literal_formula() {
    let (mut store, ga) = graph_attn(2, 1, 3);
    let w = vec![vec![1.5, -0.5], vec![0.25, 1.0]];
    let a = [0.4, 0.9, -0.6, 0.1];
    set(&mut store, ga.transforms[0], &w);
    set(
        &mut store,
        ga.attention[0],
        &a.iter().map(|&v| vec![v]).collect::<Vec<_>>(),
    );
    let x = vec![vec![0.2, -1.0], vec![1.0, 0.5]];
    let wt = Tensor::from_rows(&w).unwrap();
    let alpha = oracle_alpha(&x, &wt, &a, &[true, true]);
    let z: Vec<Vec<f64>> = x.iter().map(|xi| vec_mat(xi, &wt)).collect();
    let mut s = Session::eval(&store);
    let xv = nodes(&mut s, &x);
    let out = ga.forward(&mut s, xv, &NodeMask::all(2)).unwrap();
    for i in 0..2 {
        for c in 0..2 {
            let msg: f64 = (0..2).map(|j| alpha[i][j] * z[j][c]).sum();
            let expect = x[i][c] + leaky(msg);
            assert!((s.tape.value(out).get2(i, c) - expect).abs() < 1e-14);
        }
    }
}

#[test]
fn single_node_message_is_transform_of_itself() {
    let (store, ga) = graph_attn(4, 2, 4);
    let x = vec![0.3, -0.2, 1.0, 0.5];
    let mut s = Session::eval(&store);
    let xv = nodes(&mut s, &[x.clone()]);
    let out = ga.forward(&mut s, xv, &NodeMask::all(1)).unwrap();
    let mut expect = x.clone();
    for k in 0..2 {
        let z = vec_mat(&x, &store.get(ga.transforms[k]).value);
        for (c, v) in z.into_iter().enumerate() {
            expect[2 * k + c] += leaky(v);
        }
    }
    for (g, e) in s.tape.value(out).data().iter().zip(&expect) {
        assert!((g - e).abs() < 1e-15);
    }
}

fn g2g(dim: usize, heads: usize, seed: u64) -> (ParamStore, GraphToGraphAttention) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let m = GraphToGraphAttention::new(
        &mut store,
        &mut rng,
        "g2g",
        AttentionDims::new(dim, heads).unwrap(),
    )
    .unwrap();
    (store, m)
}

#[test]
fn graph_to_graph_matches_literal_formula() {
    let (mut store, m) = g2g(2, 1, 5);
    let ws = vec![vec![1.0, 0.5], vec![-0.5, 2.0]];
    let wt = vec![vec![0.3, 0.0], vec![1.0, -1.0]];
    let a = [0.8, -0.4, 1.2, 0.6];
    set(&mut store, m.source_transforms[0], &ws);
    set(&mut store, m.target_transforms[0], &wt);
    set(
        &mut store,
        m.attention[0],
        &a.iter().map(|&v| vec![v]).collect::<Vec<_>>(),
    );
    let src = vec![vec![0.5, -1.0], vec![1.5, 0.25]];
    let tgt = vec![0.7, 0.2];
    let (wst, wtt) = (
        Tensor::from_rows(&ws).unwrap(),
        Tensor::from_rows(&wt).unwrap(),
    );
    let zt = vec_mat(&tgt, &wtt);
    let zs: Vec<Vec<f64>> = src.iter().map(|x| vec_mat(x, &wst)).collect();
    let logits: Vec<f64> = zs
        .iter()
        .map(|z| leaky(dot(&a, &zt.iter().chain(z).copied().collect::<Vec<_>>())).exp())
        .collect();
    let total: f64 = logits.iter().sum();
    let beta: Vec<f64> = logits.iter().map(|l| l / total).collect();

    let mut s = Session::eval(&store);
    let sv = nodes(&mut s, &src);
    let tv = nodes(&mut s, &[tgt.clone()]);
    let mask = NodeMask::all(2);
    let coeff = m.coefficients(&mut s, tv, sv, &mask).unwrap();
    for j in 0..2 {
        assert!((s.tape.value(coeff[0]).data()[j] - beta[j]).abs() < 1e-14);
    }
    let out = m.forward(&mut s, tv, sv, &mask).unwrap();
    for c in 0..2 {
        let msg: f64 = (0..2).map(|j| beta[j] * zs[j][c]).sum();
        assert!((s.tape.value(out).data()[c] - (tgt[c] + leaky(msg))).abs() < 1e-14);
    }
}

#[test]
fn graph_to_graph_single_source() {
    let (store, m) = g2g(4, 2, 6);
    let src = vec![0.1, 0.9, -0.4, 0.3];
    let tgt = vec![vec![1.0, 0.0, 0.5, -0.5], vec![0.2, 0.2, 0.2, 0.2]];
    let mut s = Session::eval(&store);
    let sv = nodes(&mut s, &[src.clone()]);
    let tv = nodes(&mut s, &tgt);
    let out = m.forward(&mut s, tv, sv, &NodeMask::all(1)).unwrap();
    for (i, t) in tgt.iter().enumerate() {
        for k in 0..2 {
            let z = vec_mat(&src, &store.get(m.source_transforms[k]).value);
            for c in 0..2 {
                let e = t[2 * k + c] + leaky(z[c]);
                assert!((s.tape.value(out).get2(i, 2 * k + c) - e).abs() < 1e-15);
            }
        }
    }
    assert!(m.forward(&mut s, tv, sv, &NodeMask::all(2)).is_err());
}

fn mhsa(dim: usize, heads: usize, seed: u64) -> (ParamStore, MultiHeadSelfAttention) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let m = MultiHeadSelfAttention::new(
        &mut store,
        &mut rng,
        "mhsa",
        AttentionDims::new(dim, heads).unwrap(),
    )
    .unwrap();
    (store, m)
}

#[test]
fn self_attention_matches_scaled_dot_product_oracle() {
    let (mut store, m) = mhsa(2, 1, 7);
    let wq = vec![vec![1.0, 0.5], vec![-0.5, 0.25]];
    let wk = vec![vec![0.3, -1.0], vec![0.8, 0.1]];
    let wv = vec![vec![0.6, 0.2], vec![-0.3, 1.0]];
    let wo = vec![vec![1.0, -0.2], vec![0.4, 0.9]];
    set(&mut store, m.query[0], &wq);
    set(&mut store, m.key[0], &wk);
    set(&mut store, m.value[0], &wv);
    set(&mut store, m.output, &wo);
    let x = vec![vec![0.5, 1.0], vec![-1.0, 0.25]];
    let t = |w: &Vec<Vec<f64>>| Tensor::from_rows(w).unwrap();
    let q: Vec<Vec<f64>> = x.iter().map(|r| vec_mat(r, &t(&wq))).collect();
    let k: Vec<Vec<f64>> = x.iter().map(|r| vec_mat(r, &t(&wk))).collect();
    let v: Vec<Vec<f64>> = x.iter().map(|r| vec_mat(r, &t(&wv))).collect();
    let mut s = Session::eval(&store);
    let xv = nodes(&mut s, &x);
    let out = m.forward(&mut s, xv, &NodeMask::all(2)).unwrap();
    for i in 0..2 {
        let scores: Vec<f64> = (0..2)
            .map(|j| (dot(&q[i], &k[j]) / 2f64.sqrt()).exp())
            .collect();
        let total: f64 = scores.iter().sum();
        let head: Vec<f64> = (0..2)
            .map(|c| (0..2).map(|j| scores[j] / total * v[j][c]).sum())
            .collect();
        let proj = vec_mat(&head, &t(&wo));
        for c in 0..2 {
            assert!((s.tape.value(out).get2(i, c) - (x[i][c] + proj[c])).abs() < 1e-14);
        }
    }
}

#[test]
fn self_attention_single_node_attends_to_itself() {
    let (store, m) = mhsa(4, 2, 8);
    let mut s = Session::eval(&store);
    let x = nodes(&mut s, &[vec![1.0, 2.0, 3.0, 4.0]]);
    for w in m.weights(&mut s, x, &NodeMask::all(1)).unwrap() {
        assert_eq!(s.tape.value(w).data(), &[1.0]);
    }
}

#[test]
fn zero_transforms_are_exact_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_matrix(&mut rng, 5, 6);
    let mask = NodeMask::new(vec![true, true, false, true, false]).unwrap();

    let (mut store, ga) = graph_attn(6, 3, 10);
    zero(&mut store, &ga.transforms);
    let mut s = Session::eval(&store);
    let xv = s.tape.constant(x.clone());
    let out = ga.forward(&mut s, xv, &mask).unwrap();
    assert_eq!(s.tape.value(out), &x);

    let (mut store, m) = g2g(6, 3, 11);
    zero(&mut store, &m.source_transforms);
    let mut s = Session::eval(&store);
    let src = s.tape.constant(rand_matrix(&mut rng, 5, 6));
    let xv = s.tape.constant(x.clone());
    let out = m.forward(&mut s, xv, src, &mask).unwrap();
    assert_eq!(s.tape.value(out), &x);

    let (mut store, m) = mhsa(6, 3, 12);
    zero(&mut store, &m.value);
    let mut s = Session::eval(&store);
    let xv = s.tape.constant(x.clone());
    let out = m.forward(&mut s, xv, &mask).unwrap();
    assert_eq!(s.tape.value(out), &x);
}

fn ffn(dim: usize, hidden: usize) -> (ParamStore, FeedForward) {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::new();
    let f = FeedForward::new(&mut store, &mut rng, "ffn", dim, hidden, 0.0);
    (store, f)
}

#[test]
fn feed_forward_examples() {
    let x = Tensor::from_rows(&[vec![0.5, 1.5, 2.0], vec![3.0, 0.25, 1.0]]).unwrap();

    let (mut store, f) = ffn(3, 4);
    zero(
        &mut store,
        &[
            f.hidden.weight,
            f.hidden.bias.unwrap(),
            f.output.weight,
            f.output.bias.unwrap(),
        ],
    );
    let mut s = Session::eval(&store);
    let xv = s.tape.constant(x.clone());
    let out = f.forward(&mut s, xv).unwrap();
    assert_eq!(s.tape.value(out), &x);

    // first layer embeds [I | -I], second recovers the positive half
    let (mut store, f) = ffn(3, 6);
    let mut w1 = vec![vec![0.0; 6]; 3];
    let mut w2 = vec![vec![0.0; 3]; 6];
    for i in 0..3 {
        w1[i][i] = 1.0;
        w1[i][i + 3] = -1.0;
        w2[i][i] = 1.0;
    }
    set(&mut store, f.hidden.weight, &w1);
    set(&mut store, f.output.weight, &w2);
    let mut s = Session::eval(&store);
    let xv = s.tape.constant(x.clone());
    let out = f.forward(&mut s, xv).unwrap();
    for (o, v) in s.tape.value(out).data().iter().zip(x.data()) {
        assert_eq!(*o, 2.0 * v);
    }

    // all pre-activations negative: only the residual survives
    let (mut store, f) = ffn(3, 4);
    set(&mut store, f.hidden.weight, &vec![vec![-1.0; 4]; 3]);
    let mut s = Session::eval(&store);
    let xv = s.tape.constant(x.clone());
    let out = f.forward(&mut s, xv).unwrap();
    let bias = store.get(f.output.bias.unwrap()).value.data().to_vec();
    assert!(bias.iter().all(|&b| b == 0.0));
    assert_eq!(s.tape.value(out), &x);
}

#[test]
fn coefficient_rows_sum_to_one_across_random_configurations() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for seed in 0..50u64 {
        let heads = rng.gen_range(1..4);
        let dim = heads * rng.gen_range(1..4);
        let n = rng.gen_range(1..8);
        let valid: Vec<bool> = (0..n).map(|i| i == 0 || rng.gen_bool(0.7)).collect();
        let mask = NodeMask::new(valid.clone()).unwrap();
        let dims = AttentionDims::new(dim, heads).unwrap();
        let mut store = ParamStore::new();
        let mut init = ChaCha8Rng::seed_from_u64(seed);
        let ga = GraphAttention::new(&mut store, &mut init, "ga", dims).unwrap();
        let gg = GraphToGraphAttention::new(&mut store, &mut init, "gg", dims).unwrap();
        let sa = MultiHeadSelfAttention::new(&mut store, &mut init, "sa", dims).unwrap();
        let mut s = Session::eval(&store);
        let x = s.tape.constant(rand_matrix(&mut rng, n, dim));
        let t = s.tape.constant(rand_matrix(&mut rng, 3, dim));
        let mut mats = ga.coefficients(&mut s, x, &mask).unwrap();
        mats.extend(gg.coefficients(&mut s, t, x, &mask).unwrap());
        mats.extend(sa.weights(&mut s, x, &mask).unwrap());
        for m in mats {
            let v = s.tape.value(m);
            for i in 0..v.rows() {
                let row = v.row(i);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for (j, &p) in row.iter().enumerate() {
                    if !valid[j] {
                        assert_eq!(p, 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn padded_nodes_do_not_leak_into_valid_outputs() {
    let dims = AttentionDims::new(6, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut store = ParamStore::new();
    let block = GraphSelfAttentionBlock::new(&mut store, &mut rng, "enc", dims).unwrap();
    let cross = GraphToGraphBlock::new(&mut store, &mut rng, "dec", dims).unwrap();
    let base = rand_matrix(&mut rng, 4, 6);
    let queries = rand_matrix(&mut rng, 3, 6);
    let run = |x: &Tensor, mode: Mode| {
        let n = x.rows();
        let mask = NodeMask::prefix(4, n).unwrap();
        let mut s = Session::new(&store, mode, false);
        let xv = s.tape.constant(x.clone());
        let h = block.forward(&mut s, xv, &mask).unwrap();
        let q = s.tape.constant(queries.clone());
        let y = cross.forward(&mut s, q, h, &mask).unwrap();
        (
            s.tape.value(h).data()[..24].to_vec(),
            s.tape.value(y).data().to_vec(),
        )
    };
    for mode in [Mode::Eval, Mode::Train] {
        let (h0, y0) = run(&base, mode);
        for pad in 1..=8 {
            let mut data = base.data().to_vec();
            data.extend((0..pad * 6).map(|_| rng.gen_range(-5.0..5.0)));
            let padded = Tensor::matrix(4 + pad, 6, data).unwrap();
            let (h, y) = run(&padded, mode);
            let dh = h
                .iter()
                .zip(&h0)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            let dy = y
                .iter()
                .zip(&y0)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(dh < 1e-9 && dy < 1e-9, "{mode:?} pad {pad}: {dh} {dy}");
        }
    }
}

#[test]
fn graph_self_attention_is_permutation_equivariant() {
    let (store, ga) = graph_attn(6, 2, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = rand_matrix(&mut rng, 5, 6);
    let perm = [3, 0, 4, 1, 2];
    let permuted =
        Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
    let run = |x: &Tensor| {
        let mut s = Session::eval(&store);
        let xv = s.tape.constant(x.clone());
        let out = ga.forward(&mut s, xv, &NodeMask::all(5)).unwrap();
        s.tape.value(out).clone()
    };
    let (a, b) = (run(&x), run(&permuted));
    for (r, &i) in perm.iter().enumerate() {
        for c in 0..6 {
            assert!((b.get2(r, c) - a.get2(i, c)).abs() < 1e-12);
        }
    }
}

fn scalarized(s: &mut Session<'_>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, c) = s.tape.value(y).dims2()?;
    let w = s.tape.constant(rand_matrix(&mut rng, r, c));
    let p = s.tape.mul(y, w)?;
    Ok(s.tape.sum(p))
}

#[test]
fn attention_ops_pass_grad_check() {
    let dims = AttentionDims::new(4, 2).unwrap();
    let mut checked = [0usize; 5];
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ga = GraphAttention::new(&mut store, &mut rng, "ga", dims).unwrap();
        let gg = GraphToGraphAttention::new(&mut store, &mut rng, "gg", dims).unwrap();
        let sa = MultiHeadSelfAttention::new(&mut store, &mut rng, "sa", dims).unwrap();
        let ff = FeedForward::new(&mut store, &mut rng, "ff", 4, 6, 0.0);
        let blk = GraphSelfAttentionBlock::new(&mut store, &mut rng, "blk", dims).unwrap();
        // treat inputs as parameters so the check covers them too
        let x = store.add("x", ParamKind::Embedding, rand_matrix(&mut rng, 3, 4));
        let t = store.add("t", ParamKind::Embedding, rand_matrix(&mut rng, 2, 4));
        let mask = NodeMask::new(vec![true, false, true]).unwrap();
        let cases: [&dyn Fn(&mut Session<'_>) -> Result<Var>; 5] = [
            &|s| {
                let xv = s.param(x);
                let y = ga.forward(s, xv, &mask)?;
                scalarized(s, y, 1)
            },
            &|s| {
                let (xv, tv) = (s.param(x), s.param(t));
                let y = gg.forward(s, tv, xv, &mask)?;
                scalarized(s, y, 2)
            },
            &|s| {
                let xv = s.param(x);
                let y = sa.forward(s, xv, &mask)?;
                scalarized(s, y, 3)
            },
            &|s| {
                let xv = s.param(x);
                let y = ff.forward(s, xv)?;
                scalarized(s, y, 4)
            },
            &|s| {
                let xv = s.param(x);
                let y = blk.forward(s, xv, &mask)?;
                let y = s.tape.mask_rows(y, mask.as_slice())?;
                scalarized(s, y, 5)
            },
        ];
        for (i, case) in cases.iter().enumerate() {
            let check = param_grad_check(&store, Mode::Train, 1e-5, case).unwrap();
            if check.kink_margin <= 1e-3 {
                continue;
            }
            assert!(
                check.report.max_rel_error < 1e-5,
                "case {i} seed {seed}: {}",
                check.report.max_rel_error
            );
            checked[i] += 1;
        }
    }
    assert!(checked.iter().all(|&c| c >= 3), "{checked:?}");
}

#[test]
fn rejects_indivisible_heads_and_bad_shapes() {
    assert!(AttentionDims::new(6, 4).is_err());
    let (store, ga) = graph_attn(4, 2, 18);
    let mut s = Session::eval(&store);
    let x = s.tape.constant(Tensor::zeros(&[3, 5]));
    assert!(matches!(
        ga.forward(&mut s, x, &NodeMask::all(3)),
        Err(crate::Error::Shape(_))
    ));
}
