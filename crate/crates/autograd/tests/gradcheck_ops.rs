use duet_autograd::gradcheck::check_input_gradient;
use duet_autograd::{AdamW, Bindings, Conv2dGeom, Graph, ParamStore, Tensor};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-5;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn all(x: &Tensor) -> Vec<usize> {
    (0..x.len()).collect()
}

/// Weighted sum so every output element carries a distinct gradient.
fn probe<'g>(g: &'g Graph, y: duet_autograd::Var<'g>, seed: u64) -> duet_autograd::Var<'g> {
    let w = g.constant(random(&y.shape(), seed));
    (y * w).sum()
}

#[test]
fn elementwise_and_reductions() {
    let x = random(&[3, 4], 1);
    let err = check_input_gradient(&x, &all(&x), 1e-6, 1e-8, |g, v| {
        let a = v.gelu() + v.silu().scale(0.5) + v.square().offset(1.0).powf(0.5);
        let b = v.abs().sum_axis(1).mean_axis(0);
        probe(g, a, 7).add(b.sum())
    });
    assert!(err < TOL, "err {err}");
}

#[test]
fn broadcast_add_mul() {
    let x = random(&[2, 3, 4], 2);
    let bias = random(&[4], 3);
    let row = random(&[2, 1, 4], 4);
    let err = check_input_gradient(&x, &all(&x), 1e-6, 1e-8, |g, v| {
        let y = v.add(g.constant(bias.clone())).mul(g.constant(row.clone())).mul(v);
        probe(g, y, 5)
    });
    assert!(err < TOL, "err {err}");
    // gradient w.r.t. the broadcast operand
    let err = check_input_gradient(&row, &all(&row), 1e-6, 1e-8, |g, r| {
        let y = g.constant(x.clone()).mul(r).add(r);
        probe(g, y, 6)
    });
    assert!(err < TOL, "err {err}");
}

#[test]
fn matmul_and_bmm() {
    let x = random(&[2, 3, 5], 8);
    let w = random(&[5, 4], 9);
    let err = check_input_gradient(&x, &all(&x), 1e-6, 1e-8, |g, v| probe(g, v.matmul(g.constant(w.clone())), 10));
    assert!(err < TOL, "err {err}");
    let err = check_input_gradient(&w, &all(&w), 1e-6, 1e-8, |g, v| probe(g, g.constant(x.clone()).matmul(v), 10));
    assert!(err < TOL, "err {err}");
    let k = random(&[2, 6, 5], 11);
    let err = check_input_gradient(&x, &all(&x), 1e-6, 1e-8, |g, v| probe(g, v.bmm(g.constant(k.clone()), true), 12));
    assert!(err < TOL, "err {err}");
    let err = check_input_gradient(&k, &all(&k), 1e-6, 1e-8, |g, v| probe(g, g.constant(x.clone()).bmm(v, true), 12));
    assert!(err < TOL, "err {err}");
    let r = random(&[2, 5, 3], 13);
    let err = check_input_gradient(&r, &all(&r), 1e-6, 1e-8, |g, v| probe(g, g.constant(x.clone()).bmm(v, false), 14));
    assert!(err < TOL, "err {err}");
}

#[test]
fn shape_ops() {
    let x = random(&[2, 3, 4], 15);
    let err = check_input_gradient(&x, &all(&x), 1e-6, 1e-8, |g, v| {
        let p = v.permute(&[2, 0, 1]).reshape(&[4, 6]);
        let a = v.narrow(1, 1, 2);
        let c = duet_autograd::Var::concat(&[a, v.narrow(1, 0, 1)], 1);
        let s = v.index_select(2, &[3, 0, 0, 2]);
        probe(g, p, 16).add(probe(g, c, 17)).add(probe(g, s, 18))
    });
    assert!(err < TOL, "err {err}");
}

#[test]
fn softmax_layer_norm_cross_entropy() {
    let x = random(&[3, 5], 19);
    let err = check_input_gradient(&x, &all(&x), 1e-6, 1e-8, |g, v| {
        probe(g, v.softmax(), 20).add(probe(g, v.scale(3.0).layer_norm(1e-5), 21))
    });
    assert!(err < TOL, "err {err}");
    let err = check_input_gradient(&x, &all(&x), 1e-6, 1e-8, |_, v| v.cross_entropy(&[4, 0, 2]));
    assert!(err < TOL, "err {err}");
}

#[test]
fn conv2d_strided_and_padded() {
    let x = random(&[2, 7, 6, 3], 22);
    let w = random(&[4, 3, 3, 5], 23);
    for geom in [
        Conv2dGeom { kernel: (4, 3), stride: (2, 2), padding: (1, 1) },
        Conv2dGeom { kernel: (4, 3), stride: (1, 3), padding: (0, 0) },
    ] {
        let err = check_input_gradient(&x, &all(&x), 1e-6, 1e-8, |g, v| probe(g, v.conv2d(g.constant(w.clone()), geom), 24));
        assert!(err < TOL, "input err {err}");
        let err = check_input_gradient(&w, &all(&w), 1e-6, 1e-8, |g, v| probe(g, g.constant(x.clone()).conv2d(v, geom), 24));
        assert!(err < TOL, "weight err {err}");
    }
}

#[test]
fn conv2d_matches_direct_loop() {
    let x = random(&[1, 5, 4, 2], 30);
    let w = random(&[3, 2, 2, 3], 31);
    let geom = Conv2dGeom { kernel: (3, 2), stride: (2, 1), padding: (1, 0) };
    let g = Graph::new();
    let y = g.constant(x.clone()).conv2d(g.constant(w.clone()), geom).value();
    let (ho, wo) = geom.output_size(5, 4).unwrap();
    assert_eq!(y.shape(), &[1, ho, wo, 3]);
    for oy in 0..ho {
        for ox in 0..wo {
            for o in 0..3 {
                let mut acc = 0.0;
                for ky in 0..3 {
                    for kx in 0..2 {
                        let iy = (oy * 2 + ky) as isize - 1;
                        let ix = ox + kx;
                        if iy < 0 || iy >= 5 {
                            continue;
                        }
                        for c in 0..2 {
                            acc += x[[0, iy as usize, ix, c]] * w[[ky, kx, c, o]];
                        }
                    }
                }
                assert!((y[[0, oy, ox, o]] - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn straight_through_copies_gradient() {
    let x = random(&[4], 40);
    let q = random(&[4], 41);
    let g = Graph::new();
    let v = g.leaf(std::rc::Rc::new(x));
    let st = v.straight_through(q.clone());
    assert_eq!(*st.value(), q);
    st.retain_grad();
    let loss = probe(&g, st, 42);
    let grads = g.backward(loss);
    assert_eq!(grads.get(v).unwrap(), grads.get(st).unwrap());
}

#[test]
fn adam_reduces_quadratic() {
    let mut store = ParamStore::new();
    store.insert("w", random(&[8], 50));
    let mut opt = AdamW::new();
    let mut last = f64::INFINITY;
    for _ in 0..200 {
        let g = Graph::new();
        let b = Bindings::new(&g, &store);
        let loss = b.p("w").offset(-0.3).square().sum();
        last = loss.item();
        let mut grads = g.backward(loss);
        let grads = b.gradients(&mut grads);
        drop(b);
        opt.step(&mut store, &grads, 0.05);
    }
    assert!(last < 1e-3, "loss {last}");
}
