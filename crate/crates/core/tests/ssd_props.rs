use moe_ssm::ssd::{apply_materialized, semiseparable_materialize, ssd_chunked, ChunkPlan, DecayMode};
use moe_ssm::ssm::{selective_ssm, ScanOptions};
use moe_ssm::{Matrix, SequenceBatch, StreamSet, Tensor3, Transition};
use proptest::prelude::*;

const N: usize = 3;
const P: usize = 2;

fn vals(len: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, len)
}

#[derive(Debug)]
struct Problem {
    a: Transition,
    streams: StreamSet,
    x: SequenceBatch,
    h0: Vec<f64>,
}

fn problem() -> impl Strategy<Value = Problem> {
    (1usize..40).prop_flat_map(|t| {
        (
            vals(t, 0.05, 1.0),
            vals(t * N * P, -1.0, 1.0),
            vals(t * N * P, -1.0, 1.0),
            vals(t * P, -1.0, 1.0),
            vals(N * P, -1.0, 1.0),
        )
            .prop_map(move |(a, b, c, x, h0)| Problem {
                a: Transition::ScalarPerStep(a),
                streams: StreamSet::new(
                    Tensor3::from_vec(t, N, P, b).unwrap(),
                    Tensor3::from_vec(t, N, P, c).unwrap(),
                    Matrix::zeros(t, P),
                )
                .unwrap(),
                x: SequenceBatch::from_vec(t, P, x).unwrap(),
                h0,
            })
    })
}

fn max_dev(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chunked_matches_sequential_for_any_chunk(pr in problem(), q in 1usize..50, log in any::<bool>()) {
        let steps = pr.x.steps();
        let seq = selective_ssm(&pr.a, &pr.streams, &pr.x, Some(&pr.h0), ScanOptions::default()).unwrap();
        let plan = ChunkPlan::new(steps, q.min(steps)).unwrap();
        let mode = if log { DecayMode::Log } else { DecayMode::Linear };
        let out = ssd_chunked(&pr.a, &pr.streams, &pr.x, &plan, Some(&pr.h0), mode).unwrap();
        let scale = seq.y.as_slice().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        prop_assert!(max_dev(out.y.as_slice(), seq.y.as_slice()) <= 1e-12 * scale);
        prop_assert!(max_dev(&out.final_state, &seq.final_state) <= 1e-12 * scale);
        prop_assert_eq!(out.chunk_states.len(), plan.num_chunks());
        prop_assert_eq!(out.chunk_states.last().unwrap(), &out.final_state);
    }

    #[test]
    fn chunk_size_does_not_change_the_output(pr in problem(), q1 in 1usize..50, q2 in 1usize..50) {
        let steps = pr.x.steps();
        let run = |q: usize| {
            ssd_chunked(&pr.a, &pr.streams, &pr.x, &ChunkPlan::new(steps, q.min(steps)).unwrap(), None, DecayMode::Linear)
                .unwrap()
                .y
        };
        let (a, b) = (run(q1), run(q2));
        let scale = a.as_slice().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        prop_assert!(max_dev(a.as_slice(), b.as_slice()) <= 1e-12 * scale);
    }

    #[test]
    fn materialized_operator_matches_scan(pr in problem()) {
        let seq = selective_ssm(&pr.a, &pr.streams, &pr.x, None, ScanOptions::default()).unwrap();
        let ms = semiseparable_materialize(&pr.a, &pr.streams).unwrap();
        prop_assert_eq!(ms.len(), P);
        let y = apply_materialized(&ms, pr.x.matrix());
        prop_assert!(max_dev(y.as_slice(), seq.y.as_slice()) <= 1e-12);
        // Lower triangular: no output depends on future inputs.
        for m in &ms {
            for i in 0..m.rows() {
                for j in i + 1..m.cols() {
                    prop_assert_eq!(m[(i, j)], 0.0);
                }
            }
        }
    }
}

#[test]
fn unit_chunks_reproduce_the_recurrence_exactly() {
    let t = 9;
    let a = Transition::ScalarPerStep((0..t).map(|i| 0.3 + 0.07 * i as f64).collect());
    let fill = |k: usize| (0..k).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect::<Vec<_>>();
    let streams = StreamSet::new(
        Tensor3::from_vec(t, N, P, fill(t * N * P)).unwrap(),
        Tensor3::from_vec(t, N, P, fill(t * N * P).into_iter().rev().collect()).unwrap(),
        Matrix::zeros(t, P),
    )
    .unwrap();
    let x = SequenceBatch::from_vec(t, P, fill(t * P)).unwrap();
    let seq = selective_ssm(&a, &streams, &x, None, ScanOptions::default()).unwrap();
    let out = ssd_chunked(
        &a,
        &streams,
        &x,
        &ChunkPlan::new(t, 1).unwrap(),
        None,
        DecayMode::Linear,
    )
    .unwrap();
    assert_eq!(out.y, seq.y);
    assert_eq!(out.final_state, seq.final_state);
}

#[test]
fn chunk_plan_covers_the_sequence() {
    let plan = ChunkPlan::new(10, 4).unwrap();
    assert_eq!(plan.num_chunks(), 3);
    assert_eq!(plan.range(2), 8..10);
    assert!(ChunkPlan::new(10, 0).is_err());
}
