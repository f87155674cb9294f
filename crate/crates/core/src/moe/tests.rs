use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;

use super::*;
use crate::autodiff::grad_check;
use crate::rng;

fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let n = shape.iter().product::<usize>();
    Tensor::new(shape, (0..n).map(|i| rng::symmetric(seed, 5, i as u64, scale)).collect()).unwrap()
}

fn experts(m: usize, d: usize, h: usize, seed: u64) -> ExpertParams {
    ExpertParams::new(
        (0..m as u64)
            .map(|e| Expert {
                w1: random(&[d, h], seed * 100 + e * 4, 0.8),
                b1: random(&[h], seed * 100 + e * 4 + 1, 0.2),
                w2: random(&[h, d], seed * 100 + e * 4 + 2, 0.8),
                b2: random(&[d], seed * 100 + e * 4 + 3, 0.2),
            })
            .collect(),
    )
    .unwrap()
}

fn identity(n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        t.data_mut()[i * n + i] = 1.0;
    }
    t
}

#[test]
fn topk_examples() {
    let m = topk_mask(&[0.1, 2.0, -1.0, 0.5], 2).unwrap();
    assert_eq!(m.to_binary(), vec![false, true, false, true]);
    let m = topk_mask(&[0.3; 4], 2).unwrap();
    assert_eq!(m.to_binary(), vec![true, true, false, false]);
    assert_eq!(topk_mask(&[1.0, 2.0], 3), Err(Error::TopK { k: 3, m: 2 }));
    assert!(topk_mask(&[1.0, 2.0], 0).is_err());
}

proptest! {
    #[test]
    fn topk_invariant_under_increasing_transform(
        s in proptest::collection::vec(-5.0f64..5.0, 2..12),
        k_frac in 0.0f64..1.0,
        a in 0.1f64..4.0,
        b in -3.0f64..3.0,
    ) {
        let k = 1 + ((s.len() - 1) as f64 * k_frac) as usize;
        let base = topk_mask(&s, k).unwrap();
        prop_assert_eq!(base.count(), k);
        let affine: Vec<f64> = s.iter().map(|v| a * v + b).collect();
        let cubic: Vec<f64> = s.iter().map(|v| v * v * v + v).collect();
        prop_assert_eq!(&topk_mask(&affine, k).unwrap(), &base);
        prop_assert_eq!(&topk_mask(&cubic, k).unwrap(), &base);
        // every selected logit is >= every unselected one
        let sel: Vec<f64> = (0..s.len()).filter(|&i| base.contains(i)).map(|i| s[i]).collect();
        let rest: Vec<f64> = (0..s.len()).filter(|&i| !base.contains(i)).map(|i| s[i]).collect();
        let lo = sel.iter().copied().fold(f64::INFINITY, f64::min);
        prop_assert!(rest.iter().all(|&r| r <= lo));
    }
}

#[test]
fn router_logits_examples() {
    let p = EngineProfile::canonical();
    let r = RouterParams::new(random(&[3, 4], 1, 1.0), 2).unwrap();
    assert_eq!(router_logits(&[0.0; 3], &r, &p).unwrap(), vec![0.0; 4]);
    let id = RouterParams::new(identity(4), 1).unwrap();
    assert_eq!(router_logits(&[0.0, 1.0, 0.0, 0.0], &id, &p).unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
    // brute-force dot products
    let x = [0.3, -1.1, 2.5];
    let got = router_logits(&x, &r, &p).unwrap();
    let w = r.weight.data();
    for j in 0..4 {
        let mut s = 0.0;
        for i in 0..3 {
            s += x[i] * w[i * 4 + j];
        }
        assert!((got[j] - s).abs() < 1e-15);
    }
    assert!(router_logits(&[1.0; 2], &r, &p).is_err());
    assert!(RouterParams::new(random(&[3, 4], 1, 1.0), 5).is_err());
}

#[test]
fn replay_of_own_mask_is_bit_identical() {
    let d = 6;
    let r = RouterParams::new(random(&[d, 5], 2, 1.0), 2).unwrap();
    let ex = experts(5, d, 7, 3);
    for profile in [EngineProfile::canonical(), EngineProfile::default_training()] {
        for seed in 0..20 {
            let x: Vec<f64> = (0..d).map(|i| rng::symmetric(seed, 9, i as u64, 1.0)).collect();
            let (y, tr) = moe_forward(&x, &r, &ex, RouteMode::Standard, true, &profile).unwrap();
            let mask = tr.unwrap().masks.remove(0);
            let (z, _) = moe_forward(&x, &r, &ex, RouteMode::Replay(&mask), false, &profile).unwrap();
            assert!(y.iter().zip(&z).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}

#[test]
fn single_selected_expert_gets_full_weight() {
    let d = 4;
    let r = RouterParams::new(random(&[d, 2], 4, 3.0), 1).unwrap();
    let ex = experts(2, d, 5, 5);
    let x = [0.5, -0.25, 1.0, 2.0];
    let mask = RoutingMask::from_binary(&[false, true]).unwrap();
    let (y, _) = moe_forward(&x, &r, &ex, RouteMode::Replay(&mask), false, &EngineProfile::canonical()).unwrap();
    let e2 = ex.experts[1].view().forward_row(&x, Reduction::CANONICAL);
    assert_eq!(y, e2);
}

#[test]
fn symmetric_selected_logits_split_evenly() {
    let d = 4;
    let r = RouterParams::new(identity(4), 2).unwrap();
    let ex = experts(4, d, 3, 6);
    let x = [1.0, 5.0, 1.0, 0.0];
    let mask = RoutingMask::from_binary(&[true, false, true, false]).unwrap();
    let (y, _) = moe_forward(&x, &r, &ex, RouteMode::Replay(&mask), false, &EngineProfile::canonical()).unwrap();
    let e1 = ex.experts[0].view().forward_row(&x, Reduction::CANONICAL);
    let e3 = ex.experts[2].view().forward_row(&x, Reduction::CANONICAL);
    for j in 0..d {
        assert!((y[j] - (0.5 * e1[j] + 0.5 * e3[j])).abs() < 1e-15);
    }
}

#[test]
fn replay_mask_validation() {
    let r = RouterParams::new(random(&[3, 4], 7, 1.0), 2).unwrap();
    let ex = experts(4, 3, 2, 8);
    let p = EngineProfile::canonical();
    let wrong_pop = RoutingMask::from_binary(&[true, true, true, false]).unwrap();
    assert!(matches!(
        moe_forward(&[1.0; 3], &r, &ex, RouteMode::Replay(&wrong_pop), false, &p),
        Err(Error::MaskPopulation { expected: 2, found: 3 })
    ));
    let wrong_len = RoutingMask::from_binary(&[true, true, false]).unwrap();
    assert!(moe_forward(&[1.0; 3], &r, &ex, RouteMode::Replay(&wrong_len), false, &p).is_err());
    assert!(RoutingMask::from_indices(4, &[1, 1]).is_err());
    assert!(RoutingMask::from_indices(4, &[4]).is_err());
}

#[test]
fn gates_are_a_distribution_on_the_mask() {
    let d = 5;
    let r = RouterParams::new(random(&[d, 8], 9, 2.0), 3).unwrap();
    let ex = experts(8, d, 4, 10);
    let views: Vec<_> = ex.experts.iter().map(Expert::view).collect();
    for seed in 0..50 {
        let x: Vec<f64> = (0..d).map(|i| rng::symmetric(seed, 1, i as u64, 2.0)).collect();
        let out = moe_forward_row(&x, r.view(), &views, RouteMode::Standard, &EngineProfile::canonical(), None).unwrap();
        let total: f64 = out.gates.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        for e in 0..8 {
            if out.mask.contains(e) {
                assert!(out.gates[e] > 0.0);
            } else {
                assert_eq!(out.gates[e], 0.0);
            }
        }
    }
}

struct TapeSetup {
    x: Tensor,
    router: Tensor,
    experts: ExpertParams,
}

fn tape_setup(n: usize, d: usize, m: usize) -> TapeSetup {
    TapeSetup {
        x: random(&[n, d], 40, 1.5),
        router: random(&[d, m], 41, 1.0),
        experts: experts(m, d, 6, 42),
    }
}

fn register(tape: &mut Tape, ex: &ExpertParams) -> Vec<ExpertVars> {
    ex.experts
        .iter()
        .map(|e| ExpertVars {
            w1: tape.param(e.w1.clone()),
            b1: tape.param(e.b1.clone()),
            w2: tape.param(e.w2.clone()),
            b2: tape.param(e.b2.clone()),
        })
        .collect()
}

#[test]
fn tape_layer_matches_row_layer_bitwise() {
    let (n, d, m) = (7, 5, 6);
    let s = tape_setup(n, d, m);
    let profile = EngineProfile::default_training().with_jitter(1e-3);
    let mut tape = Tape::new();
    let x = tape.constant(s.x.clone());
    let rv = tape.param(s.router.clone());
    let ev = register(&mut tape, &s.experts);
    let routes = vec![RowRoute::Standard; n];
    let positions: Vec<usize> = (10..10 + n).collect();
    let out = moe_forward_tape(&mut tape, x, rv, &ev, 2, &routes, &profile, &positions, 3).unwrap();
    assert_eq!(out.selected_locally, n);
    let router = RouterParams::new(s.router.clone(), 2).unwrap();
    let views: Vec<_> = s.experts.experts.iter().map(Expert::view).collect();
    for i in 0..n {
        let row = moe_forward_row(s.x.row(i), router.view(), &views, RouteMode::Standard, &profile, Some((positions[i], 3))).unwrap();
        assert_eq!(row.mask, out.masks[i]);
        let taped = tape.value(out.output).row(i);
        assert!(row.output.iter().zip(taped).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn replay_gradients_reach_router_and_skip_unselected_experts() {
    let (n, d, m) = (3, 4, 6);
    let s = tape_setup(n, d, m);
    // experts 4 and 5 never appear in the replayed masks
    let masks: [[u16; 2]; 3] = [[0, 2], [1, 2], [0, 3]];
    let routes: Vec<RowRoute<'_>> = masks.iter().map(|mk| RowRoute::Replay(mk)).collect();
    let profile = EngineProfile::canonical();
    let mut tape = Tape::new();
    let x = tape.constant(s.x.clone());
    let rv = tape.param(s.router.clone());
    let ev = register(&mut tape, &s.experts);
    let out = moe_forward_tape(&mut tape, x, rv, &ev, 2, &routes, &profile, &[0, 1, 2], 0).unwrap();
    assert_eq!(out.selected_locally, 0);
    let w = tape.constant(random(&[n, d], 43, 1.0));
    let p = tape.mul(out.output, w).unwrap();
    let loss = tape.sum(p).unwrap();
    let g = tape.backward(loss).unwrap();
    let gr = g.get(rv).unwrap();
    assert!(gr.iter().any(|v| *v != 0.0));
    for e in [4usize, 5] {
        for v in [ev[e].w1, ev[e].b1, ev[e].w2, ev[e].b2] {
            assert!(g.get(v).is_none_or(|gv| gv.iter().all(|x| *x == 0.0)));
        }
    }
    // router columns of experts never selected get exactly zero gradient
    for i in 0..d {
        assert_eq!(gr[i * m + 4], 0.0);
        assert_eq!(gr[i * m + 5], 0.0);
    }

    let err = grad_check(
        |t, r| {
            let x = t.constant(s.x.clone());
            let ev = register(t, &s.experts);
            let out = moe_forward_tape(t, x, r, &ev, 2, &routes, &profile, &[0, 1, 2], 0)?;
            let w = t.constant(random(&[n, d], 43, 1.0));
            let p = t.mul(out.output, w)?;
            t.sum(p)
        },
        &s.router,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}
