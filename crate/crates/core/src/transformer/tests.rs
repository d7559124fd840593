use super::*;
use duet_autograd::gradcheck::relative_error;
use ndarray::{s, Array};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn toy_config() -> TransformerConfig {
    TransformerConfig { blocks: 1, heads: 2, dim: 16, ffn_mult: 2, codebook_size: 12, cond_dim: 8, ..TransformerConfig::default() }
}

/// Every parameter redrawn, so gates and modulation are active.
fn randomized(config: TransformerConfig, seed: u64) -> Transformer {
    let mut m = Transformer::new(config, "none", seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for name in m.params.names().to_vec() {
        let t = m.params.get_mut(&name).unwrap();
        t.mapv_inplace(|_| 0.3 * Distribution::<f64>::sample(&StandardNormal, &mut rng));
    }
    m
}

fn random_seq(rng: &mut ChaCha8Rng, n: usize, j: usize, cfg: &TransformerConfig) -> TokenSequence {
    let mut tokens: Vec<usize> = (0..2 * n * j + 1).map(|_| rng.random_range(0..cfg.codebook_size + 2)).collect();
    tokens.iter_mut().filter(|t| **t == cfg.sep_token()).for_each(|t| *t = cfg.mask_token());
    tokens[n * j] = cfg.sep_token();
    TokenSequence { tokens, n, j }
}

fn swapped(seq: &TokenSequence) -> TokenSequence {
    let nj = seq.per_person();
    let mut tokens = seq.tokens[nj + 1..].to_vec();
    tokens.push(seq.tokens[nj]);
    tokens.extend_from_slice(&seq.tokens[..nj]);
    TokenSequence { tokens, n: seq.n, j: seq.j }
}

fn cond(rng: &mut ChaCha8Rng, d: usize) -> TextEmbedding {
    TextEmbedding { vector: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(), is_null: false }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Array::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
}

#[test]
fn flatten_and_split() {
    let a = TokenMap::new(16, 5, (0..80).collect(), 1024).unwrap();
    let b = TokenMap::new(16, 5, (100..180).collect(), 1024).unwrap();
    let seq = flatten_concat(&a, &b, 1024).unwrap();
    assert_eq!((seq.len(), seq.sep_index()), (161, 80));
    assert_eq!(seq.tokens[80], 1024);
    assert_eq!(split(&seq, 1024).unwrap(), (a.clone(), b));
    let small = TokenMap::new(16, 2, vec![0; 32], 8).unwrap();
    assert_eq!(flatten_concat(&small, &small, 8).unwrap().len(), 65);
    assert!(flatten_concat(&a, &small, 1024).is_err());
    assert!(split(&seq.with_region(&[3], 1025), 1024).is_err());
}

#[test]
fn positional_encoding_layout() {
    let pe = positional_encoding_2d(4, 3, 16);
    let origin = pe.row(0);
    for (i, &v) in origin.iter().enumerate() {
        assert_eq!(v, if i % 2 == 0 { 0.0 } else { 1.0 });
    }
    // Time half changes along rows of the grid only.
    assert_eq!(pe.slice(s![1, ..8]), pe.slice(s![0, ..8]));
    assert_ne!(pe.slice(s![3, ..8]), pe.slice(s![0, ..8]));
    assert_eq!(pe.slice(s![3, 8..]), pe.slice(s![0, 8..]));
}

#[test]
fn embedding_swap_equivariance() {
    let cfg = toy_config();
    let m = randomized(cfg.clone(), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let seq = random_seq(&mut rng, 3, 2, &cfg);
    let g = Graph::new();
    let b = Bindings::frozen(&g, &m.params);
    let e = m.embed(&b, &[&seq]).unwrap().value();
    let es = m.embed(&b, &[&swapped(&seq)]).unwrap().value();
    let nj = 6;
    assert_eq!(e.slice(s![0, ..nj, ..]), es.slice(s![0, nj + 1.., ..]));
    assert_eq!(e.slice(s![0, nj + 1.., ..]), es.slice(s![0, ..nj, ..]));
    assert_eq!(e.slice(s![0, nj, ..]), es.slice(s![0, nj, ..]));
}

#[test]
fn blocks_are_identity_at_init() {
    let cfg = TransformerConfig { blocks: 3, ..toy_config() };
    let m = Transformer::new(cfg.clone(), "none", 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = Graph::new();
    let b = Bindings::frozen(&g, &m.params);
    let x = g.constant(rand_tensor(&mut rng, &[2, 2 * 6 + 1, 16]));
    let c = g.constant(rand_tensor(&mut rng, &[2, 8]));
    let h = m.cond_features(&b, c);
    for i in 0..3 {
        let y = m.block(&b, i, x, h, 3, 2);
        assert_eq!(*y.value(), *x.value(), "block {i}");
    }
}

#[test]
fn single_key_attention_returns_value() {
    let m = randomized(toy_config(), 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let g = Graph::new();
    let b = Bindings::frozen(&g, &m.params);
    let q = g.constant(rand_tensor(&mut rng, &[3, 4, 16]));
    let kv = g.constant(rand_tensor(&mut rng, &[3, 1, 16]));
    let out = attention(&b, "b0.ca", q, kv, 2).value();
    let v = linear(&b, linear(&b, kv, "b0.ca.v"), "b0.ca.o").value();
    for gi in 0..3 {
        for r in 0..4 {
            for k in 0..16 {
                assert!((out[[gi, r, k]] - v[[gi, 0, k]]).abs() < 1e-12);
            }
        }
    }
}

/// Plain loops over heads, queries and keys.
fn attention_oracle(p: &ParamStore, name: &str, q_in: &Array2<f64>, kv_in: &Array2<f64>, heads: usize) -> Array2<f64> {
    let lin = |x: &Array2<f64>, part: &str| {
        let w = p.get(&format!("{name}.{part}.w")).unwrap().clone().into_dimensionality::<ndarray::Ix2>().unwrap();
        let bias = p.get(&format!("{name}.{part}.b")).unwrap().clone().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut out = Array2::zeros((x.nrows(), w.ncols()));
        for r in 0..x.nrows() {
            for c in 0..w.ncols() {
                let mut acc = bias[c];
                for k in 0..w.nrows() {
                    acc += x[[r, k]] * w[[k, c]];
                }
                out[[r, c]] = acc;
            }
        }
        out
    };
    let (q, k, v) = (lin(q_in, "q"), lin(kv_in, "k"), lin(kv_in, "v"));
    let d = q.ncols();
    let dh = d / heads;
    let mut ctx = Array2::zeros((q.nrows(), d));
    for h in 0..heads {
        for i in 0..q.nrows() {
            let scores: Vec<f64> = (0..k.nrows())
                .map(|t| (0..dh).map(|e| q[[i, h * dh + e]] * k[[t, h * dh + e]]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = w.iter().sum();
            for e in 0..dh {
                ctx[[i, h * dh + e]] = (0..k.nrows()).map(|t| w[t] / z * v[[t, h * dh + e]]).sum();
            }
        }
    }
    lin(&ctx, "o")
}

#[test]
fn attention_matches_loop_oracle() {
    let m = randomized(toy_config(), 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[1, 4, 16]);
    let g = Graph::new();
    let b = Bindings::frozen(&g, &m.params);
    let xv = g.constant(x.clone());
    let out = attention(&b, "b0.sa", xv, xv, 2).value();
    let x2 = x.index_axis(Axis(0), 0).to_owned().into_dimensionality().unwrap();
    let oracle = attention_oracle(&m.params, "b0.sa", &x2, &x2, 2);
    for ((r, c), &v) in oracle.indexed_iter() {
        assert!((out[[0, r, c]] - v).abs() < 1e-6);
    }
}

#[test]
fn spatio_temporal_matches_row_and_column_loops() {
    let m = randomized(toy_config(), 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, j) = (4, 2);
    let x = rand_tensor(&mut rng, &[1, n * j, 16]);
    let g = Graph::new();
    let b = Bindings::frozen(&g, &m.params);
    let out = spatio_temporal(&b, "b0.st", g.constant(x.clone()), n, j, 2).value();
    let grid = x.index_axis(Axis(0), 0).to_owned().into_dimensionality::<ndarray::Ix2>().unwrap();
    let mut expect = Array2::<f64>::zeros((n * j, 16));
    for t in 0..n {
        let rows: Vec<usize> = (0..j).map(|s| t * j + s).collect();
        let sub = grid.select(Axis(0), &rows);
        let o = attention_oracle(&m.params, "b0.st.s", &sub, &sub, 2);
        for (k, &r) in rows.iter().enumerate() {
            let mut row = expect.row_mut(r);
            row += &o.row(k);
        }
    }
    for s in 0..j {
        let cols: Vec<usize> = (0..n).map(|t| t * j + s).collect();
        let sub = grid.select(Axis(0), &cols);
        let o = attention_oracle(&m.params, "b0.st.t", &sub, &sub, 2);
        for (k, &r) in cols.iter().enumerate() {
            let mut row = expect.row_mut(r);
            row += &o.row(k);
        }
    }
    for ((r, c), &v) in expect.indexed_iter() {
        assert!((out[[0, r, c]] - v).abs() < 1e-6);
    }
}

#[test]
fn spatio_temporal_locality() {
    let m = randomized(toy_config(), 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (n, j) = (4, 3);
    for _ in 0..20 {
        let x = rand_tensor(&mut rng, &[1, n * j, 16]);
        let (tn, tj) = (rng.random_range(0..n), rng.random_range(0..j));
        let (pn, pj) = loop {
            let c = (rng.random_range(0..n), rng.random_range(0..j));
            if c.0 != tn && c.1 != tj {
                break c;
            }
        };
        let mut y = x.clone();
        for k in 0..16 {
            y[[0, pn * j + pj, k]] += rng.random_range(-2.0..2.0);
        }
        let g = Graph::new();
        let b = Bindings::frozen(&g, &m.params);
        let ox = spatio_temporal(&b, "b0.st", g.constant(x), n, j, 2).value();
        let oy = spatio_temporal(&b, "b0.st", g.constant(y), n, j, 2).value();
        assert_eq!(ox.slice(s![0, tn * j + tj, ..]), oy.slice(s![0, tn * j + tj, ..]));
    }
}

#[test]
fn cross_attention_locality_symmetry_and_swap() {
    let m = randomized(toy_config(), 14);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let nj = 6;
    let g = Graph::new();
    let b = Bindings::frozen(&g, &m.params);
    let ca = |stacked: Tensor| -> Tensor {
        let v = g.constant(stacked);
        (*attention(&b, "b0.ca", v, swap_halves(v), 2).value()).clone()
    };
    for _ in 0..20 {
        let x = rand_tensor(&mut rng, &[2, nj, 16]);
        let (u, v) = loop {
            let p = (rng.random_range(0..nj), rng.random_range(0..nj));
            if p.0 != p.1 {
                break p;
            }
        };
        let mut y = x.clone();
        for k in 0..16 {
            y[[0, u, k]] += rng.random_range(-2.0..2.0);
        }
        let (ox, oy) = (ca(x), ca(y));
        assert_eq!(ox.slice(s![0, v, ..]), oy.slice(s![0, v, ..]));
    }
    let half = rand_tensor(&mut rng, &[1, nj, 16]);
    let same = ndarray::concatenate(Axis(0), &[half.view(), half.view()]).unwrap();
    let o = ca(same);
    assert_eq!(o.index_axis(Axis(0), 0), o.index_axis(Axis(0), 1));
    let x = rand_tensor(&mut rng, &[2, nj, 16]);
    let xs = ndarray::concatenate(Axis(0), &[x.slice(s![1..2, .., ..]), x.slice(s![0..1, .., ..])]).unwrap().into_dyn();
    let (o, os) = (ca(x), ca(xs));
    assert_eq!(o.index_axis(Axis(0), 0), os.index_axis(Axis(0), 1));
    assert_eq!(o.index_axis(Axis(0), 1), os.index_axis(Axis(0), 0));
}

#[test]
fn adaln_with_zero_regressor_is_layer_norm() {
    let mut m = randomized(toy_config(), 16);
    m.params.get_mut("b0.sa.ada.w").unwrap().fill(0.0);
    m.params.get_mut("b0.sa.ada.b").unwrap().fill(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = rand_tensor(&mut rng, &[2, 5, 16]);
    let g = Graph::new();
    let b = Bindings::frozen(&g, &m.params);
    let h = g.constant(rand_tensor(&mut rng, &[2, 1, 16]));
    let y = adaln(&b, "b0.sa", g.constant(x.clone()), h).value();
    for bi in 0..2 {
        for r in 0..5 {
            let row = x.slice(s![bi, r, ..]);
            let mean = row.sum() / 16.0;
            let var = row.mapv(|v| (v - mean).powi(2)).sum() / 16.0;
            for k in 0..16 {
                let expect = (row[k] - mean) / (var + LN_EPS).sqrt();
                assert!((y[[bi, r, k]] - expect).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn adaln_gradient_wrt_condition() {
    let m = randomized(toy_config(), 18);
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let x = rand_tensor(&mut rng, &[1, 5, 16]);
    let c = rand_tensor(&mut rng, &[1, 8]);
    let target = rand_tensor(&mut rng, &[1, 5, 16]);
    let idx: Vec<usize> = (0..8).collect();
    let worst = duet_autograd::gradcheck::check_input_gradient(&c, &idx, 1e-5, 1e-6, |g, cv| {
        let b = Bindings::frozen(g, &m.params);
        let h = m.cond_features(&b, cv);
        let y = adaln(&b, "b0.sa", g.constant(x.clone()), h);
        (y - g.constant(target.clone())).square().sum()
    });
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn logits_shape_and_person_swap() {
    let cfg = TransformerConfig { blocks: 2, ..toy_config() };
    let m = randomized(cfg.clone(), 20);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let seq = random_seq(&mut rng, 4, 2, &cfg);
    let e = cond(&mut rng, 8);
    let l = m.logits(&[&seq], &[Some(&e)]).unwrap();
    assert_eq!(l.dim(), (1, 16, 12));
    let ls = m.logits(&[&swapped(&seq)], &[Some(&e)]).unwrap();
    let worst = (&l.slice(s![0, ..8, ..]) - &ls.slice(s![0, 8.., ..])).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
    let worst2 = (&l.slice(s![0, 8.., ..]) - &ls.slice(s![0, ..8, ..])).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
    assert!(worst.max(worst2) <= 1e-9, "{worst} {worst2}");
}

#[test]
fn full_size_logit_shape() {
    let cfg = TransformerConfig { blocks: 1, heads: 6, dim: 48, ..TransformerConfig::default() };
    let m = Transformer::new(cfg.clone(), "none", 0).unwrap();
    let a = TokenMap::new(16, 5, vec![3; 80], 1024).unwrap();
    let seq = flatten_concat(&a, &a, cfg.sep_token()).unwrap();
    assert_eq!(m.logits(&[&seq], &[None]).unwrap().dim(), (1, 160, 1024));
}

#[test]
fn fully_masked_sequences_agree_at_init() {
    let cfg = toy_config();
    let m = Transformer::new(cfg.clone(), "none", 22).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let s1 = random_seq(&mut rng, 2, 2, &cfg).with_region(&(0..8).collect::<Vec<_>>(), cfg.mask_token());
    let s2 = random_seq(&mut rng, 2, 2, &cfg).with_region(&(0..8).collect::<Vec<_>>(), cfg.mask_token());
    let e = cond(&mut rng, 8);
    assert_eq!(m.logits(&[&s1], &[Some(&e)]).unwrap(), m.logits(&[&s2], &[Some(&e)]).unwrap());
}

#[test]
fn null_embedding_is_learned_and_flagged() {
    let m = Transformer::new(toy_config(), "none", 24).unwrap();
    let a = m.null_embedding();
    assert_eq!(a, m.null_embedding());
    assert!(a.is_null && a.vector.iter().any(|&v| v != 0.0));
    assert!(m.params.contains("null_cond"));
}

#[test]
fn masked_ce_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let uniform = Array2::<f64>::zeros((10, 1024));
    let targets: Vec<usize> = (0..10).map(|_| rng.random_range(0..1024)).collect();
    let l = masked_ce_loss(uniform.view(), &targets, &[1, 4, 7]).unwrap();
    assert!((l - (1024f64).ln()).abs() < 1e-9);
    let mut sharp = Array2::<f64>::zeros((10, 1024));
    for (r, &t) in targets.iter().enumerate() {
        sharp[[r, t]] = 1e3;
    }
    assert!(masked_ce_loss(sharp.view(), &targets, &[0, 9]).unwrap() < 1e-12);
    let base = Array2::from_shape_fn((10, 1024), |_| rng.random_range(-3.0..3.0));
    let mask = [2, 3, 8];
    let l0 = masked_ce_loss(base.view(), &targets, &mask).unwrap();
    let mut noisy = base.clone();
    for r in (0..10).filter(|r| !mask.contains(r)) {
        noisy.row_mut(r).mapv_inplace(|_| rng.random_range(-50.0..50.0));
    }
    assert_eq!(masked_ce_loss(noisy.view(), &targets, &mask).unwrap().to_bits(), l0.to_bits());
    assert!(masked_ce_loss(base.view(), &targets, &[]).is_err());
}

#[test]
fn training_loss_gradient_matches_finite_differences() {
    let cfg = TransformerConfig { blocks: 1, heads: 2, dim: 16, ffn_mult: 2, codebook_size: 10, cond_dim: 8, ..TransformerConfig::default() };
    let m = randomized(cfg.clone(), 26);
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let seq = random_seq(&mut rng, 2, 2, &cfg);
    let targets: Vec<usize> = (0..8).map(|_| rng.random_range(0..10)).collect();
    let mask = [0usize, 3, 5, 6];
    let e = cond(&mut rng, 8);
    let loss_of = |params: &ParamStore, tracked: bool| -> (f64, Vec<(String, Tensor)>) {
        let g = Graph::new();
        let b = if tracked { Bindings::new(&g, params) } else { Bindings::frozen(&g, params) };
        let c = m.cond_var(&b, &[Some(&e)]).unwrap();
        let logits = m.forward(&b, &[&seq], c).unwrap().reshape(&[8, 10]);
        let t: Vec<usize> = mask.iter().map(|&i| targets[i]).collect();
        let loss = logits.index_select(0, &mask).cross_entropy(&t);
        let v = loss.item();
        if !tracked {
            return (v, vec![]);
        }
        let mut grads = g.backward(loss);
        (v, b.gradients(&mut grads))
    };
    let (_, grads) = loss_of(&m.params, true);
    let h = 1e-5;
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for (name, grad) in &grads {
        let flat = grad.as_slice().unwrap();
        let stride = (flat.len() / 6).max(1);
        for i in (0..flat.len()).step_by(stride) {
            let mut p = m.params.clone();
            p.get_mut(name).unwrap().as_slice_mut().unwrap()[i] += h;
            let up = loss_of(&p, false).0;
            p.get_mut(name).unwrap().as_slice_mut().unwrap()[i] -= 2.0 * h;
            let down = loss_of(&p, false).0;
            worst = worst.max(relative_error(flat[i], (up - down) / (2.0 * h), 1e-6));
            checked += 1;
        }
    }
    assert!(checked >= 200, "{checked}");
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn checkpoint_round_trip_and_tokenizer_guard() {
    let m = randomized(toy_config(), 28);
    let ck = Checkpoint::from_bytes(&m.to_checkpoint().unwrap().to_bytes().unwrap()).unwrap();
    let back = Transformer::from_checkpoint(&ck).unwrap();
    assert_eq!(back.config, m.config);
    for (name, t) in m.params.iter() {
        let r = back.params.get(name).unwrap();
        assert!(t.iter().zip(r.iter()).all(|(a, b)| (*a as f32) as f64 == *b));
    }
    assert!(back.check_tokenizer("none").is_ok());
    assert!(matches!(back.check_tokenizer("other"), Err(Error::TokenizerMismatch { .. })));
}
