mod common;

use common::{tiny, tiny_batches, tiny_config, tiny_data, transductive};
use gvse_core::graph::{propagation_operator, KnowledgeGraph, PropagationOperator};
use gvse_core::model::{gcn_layer, reshape_in, srf_pool, Affine, FusionMode, GvseModel, WiringStrategy, PAD};
use gvse_core::tensor::check_gradients;
use gvse_core::train::batch_objective;
use gvse_core::{Activation, ParamId, ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_operator(rng: &mut ChaCha8Rng, m: usize) -> PropagationOperator {
    let pairs: Vec<(usize, usize)> = (0..m)
        .flat_map(|i| (i + 1..m).map(move |j| (i, j)))
        .filter(|_| rng.random_bool(0.35))
        .collect();
    propagation_operator(&KnowledgeGraph::from_edges(m, &pairs).unwrap(), true)
}

fn dense_gcn(p: &Tensor, h: &Tensor, w: &Tensor, b: &[f64], act: Activation) -> Vec<f64> {
    let (m, k, n) = (p.rows(), h.cols(), w.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for c in 0..n {
            let mut s = 0.0;
            for j in 0..m {
                for q in 0..k {
                    s += p.at(&[i, j]) * h.at(&[j, q]) * w.at(&[q, c]);
                }
            }
            out[i * n + c] = act.apply(s + b[c]);
        }
    }
    out
}

fn run_gcn(p: &Tensor, h: &Tensor, w: &Tensor, b: &Tensor, act: Activation) -> Tensor {
    let mut tape = Tape::new();
    let (vp, vh) = (tape.constant(p.clone()), tape.constant(h.clone()));
    let map = Affine {
        weight: tape.constant(w.clone()),
        bias: Some(tape.constant(b.clone())),
    };
    let out = gcn_layer(&mut tape, vh, vp, map, act).unwrap();
    tape.value(out).clone()
}

#[test]
fn gcn_layer_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..100 {
        let m = rng.random_range(1..=12);
        let (k, n) = (rng.random_range(1..6), rng.random_range(1..6));
        let p = random_operator(&mut rng, m);
        let h = random(&mut rng, &[m, k]);
        let w = random(&mut rng, &[k, n]);
        let b = random(&mut rng, &[n]);
        for act in [Activation::Relu, Activation::Identity] {
            let got = run_gcn(p.matrix(), &h, &w, &b, act);
            let want = dense_gcn(p.matrix(), &h, &w, b.data(), act);
            let err = got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-12, "m={m}: {err}");
        }
    }
}

#[test]
fn edgeless_identity_gcn_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let p = propagation_operator(&KnowledgeGraph::edgeless(7), true);
    let h = random(&mut rng, &[7, 5]);
    let out = run_gcn(p.matrix(), &h, &Tensor::eye(5), &Tensor::zeros(&[5]), Activation::Identity);
    assert_eq!(out, h);
}

fn permute_rows(t: &Tensor, perm: &[usize], block: usize) -> Tensor {
    let width = t.len() / (perm.len() * block) * block;
    let mut data = Vec::with_capacity(t.len());
    for &src in perm {
        data.extend_from_slice(&t.data()[src * width..(src + 1) * width]);
    }
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

fn permute_operator(p: &Tensor, perm: &[usize]) -> Tensor {
    let m = perm.len();
    let mut data = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            data[i * m + j] = p.at(&[perm[i], perm[j]]);
        }
    }
    Tensor::new(vec![m, m], data).unwrap()
}

#[test]
fn gcn_layer_is_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..50 {
        let m = rng.random_range(2..=12);
        let mut perm: Vec<usize> = (0..m).collect();
        rand::seq::SliceRandom::shuffle(&mut perm[..], &mut rng);
        let p = random_operator(&mut rng, m);
        let h = random(&mut rng, &[m, 3]);
        let w = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[4]);
        let base = run_gcn(p.matrix(), &h, &w, &b, Activation::Relu);
        let moved = run_gcn(&permute_operator(p.matrix(), &perm), &permute_rows(&h, &perm, 1), &w, &b, Activation::Relu);
        assert!(moved.max_abs_diff(&permute_rows(&base, &perm, 1)) < 1e-12);
    }
}

#[test]
fn srf_pool_matches_flat_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    for _ in 0..30 {
        let (m, w, d) = (rng.random_range(1..10), rng.random_range(1..20), rng.random_range(1..6));
        let f = random(&mut rng, &[m, w]);
        let sq = random(&mut rng, &[w, d]);
        let mut tape = Tape::new();
        let (vf, vs) = (tape.constant(f.clone()), tape.constant(sq.clone()));
        let srf = srf_pool(&mut tape, vf, vs).unwrap();
        for k in 0..d {
            let mut s = 0.0;
            for i in 0..m {
                for c in 0..w {
                    s += f.data()[i * w + c] * sq.data()[c * d + k];
                }
            }
            assert!((tape.value(srf).data()[k] - s / m as f64).abs() < 1e-12);
        }
    }
}

#[test]
fn reshape_in_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let mut store = ParamStore::new();
    let x = store.add("x", random(&mut rng, &[4, 3, 3]));
    let w = store.add("w", random(&mut rng, &[5 * 2, 4]));
    let b = store.add("b", random(&mut rng, &[10]));
    let mix = random(&mut rng, &[5, 2]);
    let report = check_gradients(
        |tape: &mut Tape, st: &ParamStore| {
            let map = Affine {
                weight: tape.param(st, w),
                bias: Some(tape.param(st, b)),
            };
            let vx = tape.param(st, x);
            let h = reshape_in(tape, vx, map, 5, 2)?;
            let c = tape.constant(mix.clone());
            let prod = tape.mul(h, c)?;
            let sq = tape.mul(prod, prod)?;
            Ok(tape.sum(sq))
        },
        &store,
        &[x, w, b],
        1e-6,
        1e-7,
    )
    .unwrap();
    assert!(report.passed(), "{}", report.max_rel_err());
}

#[test]
fn total_loss_gradient_matches_central_differences() {
    let cfg = transductive();
    // Resample the initialisation until no relu input or hinge sits at a kink.
    let (t, batch, unl) = (0..50)
        .find_map(|seed| {
            let t = tiny(tiny_config(WiringStrategy::EachBlock, FusionMode::Concat), tiny_data(3, 0.1), seed);
            let (batch, unl) = tiny_batches(&t);
            let mut tape = Tape::new();
            let mut r = ChaCha8Rng::seed_from_u64(0);
            batch_objective(&mut tape, &t.model, &t.ctx, &t.data, &batch, &unl, &cfg, &mut r).unwrap();
            (tape.relu_margin() > 1e-4).then_some((t, batch, unl))
        })
        .expect("an initialisation away from every kink");
    assert_eq!(t.model.num_gcn_blocks(), 2);
    assert_eq!(t.model.dims().vertices, 6);
    let ids: Vec<ParamId> = t.model.params().ids().collect();
    let report = check_gradients(
        |tape: &mut Tape, st: &ParamStore| {
            let mut model = t.model.clone();
            *model.params_mut() = st.clone();
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let (total, parts, _) = batch_objective(tape, &model, &t.ctx, &t.data, &batch, &unl, &cfg, &mut r)?;
            assert!(parts.triplet.is_some() && parts.wordvec.is_some() && parts.bias.is_some());
            Ok(total)
        },
        t.model.params(),
        &ids,
        1e-5,
        1e-5,
    )
    .unwrap();
    for f in report.failures() {
        eprintln!("{}: {:.3e} at {}", f.name, f.max_rel_err, f.worst_index);
    }
    assert!(report.passed(), "max rel err {:.3e}", report.max_rel_err());
}

fn permuted_model(model: &GvseModel, perm: &[usize]) -> GvseModel {
    let op = PropagationOperator::from_matrix(permute_operator(model.operator().matrix(), perm)).unwrap();
    let node_dim = model.config().node_dim;
    let mut out = model.clone();
    out.set_operator(op).unwrap();
    let names: Vec<(ParamId, String)> = model.params().iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in names {
        let v = model.params().value(id);
        let moved = if name.ends_with(".in.weight") || name.ends_with(".in.bias") {
            permute_rows(v, perm, node_dim)
        } else if name.ends_with(".out.weight") {
            permute_rows(v, perm, 1)
        } else {
            continue;
        };
        *out.params_mut().value_mut(id) = moved;
    }
    out
}

#[test]
fn attribute_head_is_vertex_permutation_invariant() {
    let t = tiny(tiny_config(WiringStrategy::EachBlock, FusionMode::Concat), tiny_data(2, 0.1), 4);
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    for _ in 0..5 {
        let mut perm: Vec<usize> = (0..6).collect();
        rand::seq::SliceRandom::shuffle(&mut perm[..], &mut rng);
        let moved = permuted_model(&t.model, &perm);
        for i in [0, 5, 9] {
            let x = t.data.image(i);
            let mut ta = Tape::new();
            let a = t.model.forward(&mut ta, &x).unwrap();
            let mut tb = Tape::new();
            let b = moved.forward(&mut tb, &x).unwrap();
            assert!(ta.value(a.phi).max_abs_diff(tb.value(b.phi)) < 1e-10);
            let wa = ta.value(a.word_vectors.unwrap());
            let wb = tb.value(b.word_vectors.unwrap());
            assert!(wb.max_abs_diff(&permute_rows(wa, &perm, 1)) < 1e-10);
        }
    }
}

#[test]
fn disabled_gvse_is_the_plain_cnn() {
    let t = tiny(tiny_config(WiringStrategy::Disabled, FusionMode::Off), tiny_data(2, 0.1), 9);
    let st = t.model.params();
    let get = |name: &str| st.find(name).unwrap();
    for i in 0..t.data.len() {
        let x = t.data.image(i);
        let mut tape = Tape::new();
        let trace = t.model.forward(&mut tape, &x).unwrap();
        assert!(trace.blocks.is_empty());

        let mut plain = Tape::new();
        let mut h = plain.constant(x);
        for (b, spec) in t.model.config().blocks.iter().enumerate() {
            let w = plain.param(st, get(&format!("cnn.{b}.weight")));
            let bias = plain.param(st, get(&format!("cnn.{b}.bias")));
            let z = plain.conv2d(h, w, spec.stride, PAD).unwrap();
            let z = plain.add_bias(z, bias, 0).unwrap();
            h = plain.relu(z);
        }
        let theta = plain.global_avg_pool(h).unwrap();
        let n = plain.shape(theta)[0];
        let row = plain.reshape(theta, &[1, n]).unwrap();
        let w = plain.param(st, get("head.phi.weight"));
        let out = plain.matmul(row, w).unwrap();
        let m = plain.shape(out)[1];
        let out = plain.reshape(out, &[m]).unwrap();
        let b = plain.param(st, get("head.phi.bias"));
        let phi = plain.add_bias(out, b, 0).unwrap();

        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(tape.value(trace.theta)), bits(plain.value(theta)));
        assert_eq!(bits(tape.value(trace.phi)), bits(plain.value(phi)));
    }
}

#[test]
fn fused_width_follows_the_mode() {
    for (fusion, want) in [(FusionMode::Concat, 4 + 2 * 4), (FusionMode::Sum, 4 + 4), (FusionMode::Off, 4)] {
        let t = tiny(tiny_config(WiringStrategy::EachBlock, fusion), tiny_data(2, 0.1), 1);
        assert_eq!(t.model.fused_width(), want);
        let mut tape = Tape::new();
        let trace = t.model.forward(&mut tape, &t.data.image(0)).unwrap();
        assert_eq!(tape.shape(trace.theta_plus), &[want]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gates_stay_in_unit_interval(seed in any::<u64>(), sample in 0usize..12) {
        let t = tiny(tiny_config(WiringStrategy::EachBlock, FusionMode::Sum), tiny_data(2, 0.1), seed);
        let mut tape = Tape::new();
        let trace = t.model.forward(&mut tape, &t.data.image(sample)).unwrap();
        prop_assert_eq!(trace.blocks.len(), 2);
        for b in &trace.blocks {
            prop_assert!(tape.value(b.gate).data().iter().all(|&g| g > 0.0 && g < 1.0));
        }
        let lat = tape.value(trace.phi_lat.unwrap());
        // the stabiliser inside the square root keeps the norm just under 1
        prop_assert!(lat.norm() <= 1.0 + 1e-12 && lat.norm() > 0.99, "{}", lat.norm());
    }
}
