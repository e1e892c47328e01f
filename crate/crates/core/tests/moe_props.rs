use moe_ssm::moe::{
    expert_streams, mix_streams, mixed_forward_fused, moe_param_forward, moe_param_forward_streams,
    moe_separated_forward, moe_separated_forward_streams, separated_forward_fused, Evaluator, ExpertParams,
};
use moe_ssm::ssm::{selective_ssm, ssm_scan_sequential, ScanOptions};
use moe_ssm::{route, Matrix, RouterParams, RoutingPlan, SequenceBatch, Transition};
use proptest::prelude::*;

const T: usize = 10;
const N: usize = 3;
const P: usize = 4;

fn batch(seed: u64) -> SequenceBatch {
    let mut rng = moe_ssm::instance::substream(seed, 99);
    SequenceBatch::from_vec(T, P, moe_ssm::instance::normal_vec(&mut rng, T * P, 1.0)).unwrap()
}

fn router(seed: u64, e: usize) -> RouterParams {
    let mut rng = moe_ssm::instance::substream(seed, 98);
    RouterParams::new(
        Matrix::from_vec(e, P, moe_ssm::instance::normal_vec(&mut rng, e * P, 1.0)).unwrap(),
        None,
    )
    .unwrap()
}

fn transition() -> Transition {
    Transition::Dense(Matrix::from_rows(&[&[0.5, 0.1, 0.0], &[-0.2, 0.4, 0.1], &[0.0, 0.3, -0.3]]).unwrap())
}

fn max_dev(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

fn add(a: &SequenceBatch, b: &SequenceBatch) -> SequenceBatch {
    let v = a
        .matrix()
        .as_slice()
        .iter()
        .zip(b.matrix().as_slice())
        .map(|(x, y)| x + y)
        .collect();
    SequenceBatch::from_vec(T, P, v).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn streams_are_additive_in_tokens(seed in any::<u64>()) {
        let params = ExpertParams::random(seed, N, P, 3, 1.0).unwrap();
        let (x1, x2) = (batch(seed), batch(seed ^ 0x55));
        let s1 = expert_streams(&params, &x1).unwrap();
        let s2 = expert_streams(&params, &x2).unwrap();
        let s12 = expert_streams(&params, &add(&x1, &x2)).unwrap();
        for e in 0..3 {
            for (a, b, c) in [
                (s1[e].b.as_slice(), s2[e].b.as_slice(), s12[e].b.as_slice()),
                (s1[e].c.as_slice(), s2[e].c.as_slice(), s12[e].c.as_slice()),
                (s1[e].x.as_slice(), s2[e].x.as_slice(), s12[e].x.as_slice()),
            ] {
                let sum: Vec<f64> = a.iter().zip(b).map(|(x, y)| x + y).collect();
                prop_assert!(max_dev(&sum, c) <= 1e-12);
            }
        }
    }

    #[test]
    fn mixing_is_linear_in_routing_weights(seed in any::<u64>(), w1 in prop::collection::vec(0.0f64..1.0, 3),
                                           w2 in prop::collection::vec(0.0f64..1.0, 3)) {
        let streams = expert_streams(&ExpertParams::random(seed, N, P, 3, 1.0).unwrap(), &batch(seed)).unwrap();
        let sum: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| a + b).collect();
        let m1 = mix_streams(&streams, &RoutingPlan::time_invariant(&w1, T).unwrap()).unwrap();
        let m2 = mix_streams(&streams, &RoutingPlan::time_invariant(&w2, T).unwrap()).unwrap();
        let m = mix_streams(&streams, &RoutingPlan::time_invariant(&sum, T).unwrap()).unwrap();
        let u: Vec<f64> = m1.u.as_slice().iter().zip(m2.u.as_slice()).map(|(a, b)| a + b).collect();
        let c: Vec<f64> = m1.c.as_slice().iter().zip(m2.c.as_slice()).map(|(a, b)| a + b).collect();
        prop_assert!(max_dev(&u, m.u.as_slice()) <= 1e-12);
        prop_assert!(max_dev(&c, m.c.as_slice()) <= 1e-12);

        // The separated output is linear in the weights as well.
        let y = |w: &[f64]| {
            moe_separated_forward_streams(&streams, &transition(), &RoutingPlan::time_invariant(w, T).unwrap(), None, false)
                .unwrap()
                .y
        };
        let ys: Vec<f64> = y(&w1).as_slice().iter().zip(y(&w2).as_slice()).map(|(a, b)| a + b).collect();
        prop_assert!(max_dev(&ys, y(&sum).as_slice()) <= 1e-12);
    }

    #[test]
    fn mixed_layer_is_one_scan_over_mixed_streams(seed in any::<u64>(), k in 1usize..=4) {
        let params = ExpertParams::random(seed, N, P, 4, 1.0).unwrap();
        let x = batch(seed);
        let plan = route(&router(seed, 4), &x, k).unwrap();
        let out = moe_param_forward(&params, &transition(), &plan, &x, None, Evaluator::Sequential).unwrap();
        let generic = ssm_scan_sequential(&transition(), &out.mixed.u, &out.mixed.c, None, ScanOptions::default()).unwrap();
        prop_assert_eq!(out.y(), &generic.y);
        let fused = mixed_forward_fused(&params, &transition(), &plan, &x, None).unwrap();
        prop_assert!(max_dev(fused.as_slice(), out.y().as_slice()) <= 1e-12);
    }

    #[test]
    fn fused_separated_matches_stream_form(seed in any::<u64>(), k in 1usize..=4, parallel in any::<bool>()) {
        let params = ExpertParams::random(seed, N, P, 4, 1.0).unwrap();
        let x = batch(seed);
        let plan = route(&router(seed, 4), &x, k).unwrap();
        let reference = moe_separated_forward(&params, &transition(), &plan, &x, None).unwrap();
        let fused = separated_forward_fused(&params, &transition(), &plan, &x, parallel).unwrap();
        prop_assert!(max_dev(fused.as_slice(), reference.y.as_slice()) <= 1e-12);
    }

    #[test]
    fn chunked_evaluator_agrees_with_sequential(seed in any::<u64>(), q in 1usize..=T) {
        let params = ExpertParams::random(seed, N, P, 3, 1.0).unwrap();
        let x = batch(seed);
        let plan = route(&router(seed, 3), &x, 2).unwrap();
        let a = Transition::ScalarPerStep((0..T).map(|t| 0.3 + 0.05 * t as f64).collect());
        let seq = moe_param_forward(&params, &a, &plan, &x, None, Evaluator::Sequential).unwrap();
        let chunked = moe_param_forward(&params, &a, &plan, &x, None, Evaluator::Chunked(q)).unwrap();
        let scale = seq.y().as_slice().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        prop_assert!(max_dev(chunked.y().as_slice(), seq.y().as_slice()) <= 1e-12 * scale);
    }
}

#[test]
fn zero_tokens_and_biases_give_zero_streams() {
    let params = ExpertParams::random(1, N, P, 2, 1.0).unwrap();
    let x = SequenceBatch::from_vec(T, P, vec![0.0; T * P]).unwrap();
    for s in expert_streams(&params, &x).unwrap() {
        assert!(s
            .b
            .as_slice()
            .iter()
            .chain(s.c.as_slice())
            .chain(s.x.as_slice())
            .all(|&v| v == 0.0));
    }
}

#[test]
fn single_expert_is_a_plain_selective_ssm() {
    let params = ExpertParams::random(4, N, P, 1, 1.0).unwrap();
    let x = batch(4);
    let plan = route(&router(4, 1), &x, 1).unwrap();
    assert!(plan.weights().as_slice().iter().all(|&w| w == 1.0));
    let streams = expert_streams(&params, &x).unwrap();
    let mixed = mix_streams(&streams, &plan).unwrap();
    assert_eq!(mixed.u, streams[0].injection());
    assert_eq!(mixed.c, streams[0].c);

    let drive = SequenceBatch::new(streams[0].x.clone()).unwrap();
    let plain = selective_ssm(&transition(), &streams[0], &drive, None, ScanOptions::default()).unwrap();
    let layer = moe_param_forward(&params, &transition(), &plan, &x, None, Evaluator::Sequential).unwrap();
    assert!(max_dev(layer.y().as_slice(), plain.y.as_slice()) <= 1e-14);
    let sep = moe_separated_forward(&params, &transition(), &plan, &x, None).unwrap();
    assert!(max_dev(sep.y.as_slice(), layer.y().as_slice()) <= 1e-14);
}

#[test]
fn full_active_set_equals_dense_routing() {
    let params = ExpertParams::random(5, N, P, 3, 1.0).unwrap();
    let x = batch(5);
    let r = router(5, 3);
    let dense = moe_ssm::softmax_route(&moe_ssm::router_logits(&r, &x).unwrap()).unwrap();
    let full = route(&r, &x, 3).unwrap();
    let a = moe_param_forward(&params, &transition(), &dense, &x, None, Evaluator::Sequential).unwrap();
    let b = moe_param_forward(&params, &transition(), &full, &x, None, Evaluator::Sequential).unwrap();
    assert_eq!(a.y(), b.y());
}

#[test]
fn top1_injection_is_a_scaled_single_expert_stream() {
    let params = ExpertParams::random(6, N, P, 4, 1.0).unwrap();
    let x = batch(6);
    let plan = route(&router(6, 4), &x, 1).unwrap();
    let streams = expert_streams(&params, &x).unwrap();
    let mixed = mix_streams(&streams, &plan).unwrap();
    for t in 0..T {
        let e = plan.active(t)[0];
        let w = plan.weight(t, e);
        let inj = streams[e].injection();
        let expect: Vec<f64> = inj.slice(t).iter().map(|v| w * v).collect();
        assert_eq!(mixed.u.slice(t), &expect[..]);
    }
}

#[test]
fn identical_experts_collapse_both_designs() {
    let one = ExpertParams::random(7, N, P, 1, 1.0).unwrap();
    let params = ExpertParams::new(vec![one.experts()[0].clone(); 4]).unwrap();
    let x = batch(7);
    let plan = RoutingPlan::time_invariant(&[0.25; 4], T).unwrap();
    let mix = moe_param_forward(&params, &transition(), &plan, &x, None, Evaluator::Sequential).unwrap();
    let sep = moe_separated_forward(&params, &transition(), &plan, &x, None).unwrap();
    assert!(max_dev(mix.y().as_slice(), sep.y.as_slice()) <= 1e-12);
}

#[test]
fn mismatched_streams_are_rejected() {
    let streams = expert_streams(&ExpertParams::random(8, N, P, 2, 1.0).unwrap(), &batch(8)).unwrap();
    let plan = RoutingPlan::time_invariant(&[0.5, 0.3, 0.2], T).unwrap();
    assert!(moe_param_forward_streams(&streams, &transition(), &plan, None, Evaluator::Sequential).is_err());
    let short = RoutingPlan::time_invariant(&[0.5, 0.5], T - 1).unwrap();
    assert!(mix_streams(&streams, &short).is_err());
}
