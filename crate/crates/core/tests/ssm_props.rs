use moe_ssm::ssm::{selective_ssm, ssm_scan_sequential, zoh_discretize, DiscretizationInput, ScanOptions};
use moe_ssm::{Matrix, SequenceBatch, StreamSet, Tensor3, Transition};
use proptest::prelude::*;

const T: usize = 12;
const N: usize = 3;
const P: usize = 2;

fn vals(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, len)
}

fn transition() -> impl Strategy<Value = Transition> {
    prop_oneof![
        vals(N * N)
            .prop_map(|v| Transition::Dense(Matrix::from_vec(N, N, v.iter().map(|x| 0.5 * x).collect()).unwrap())),
        vals(N).prop_map(|v| Transition::Diagonal(v.iter().map(|x| 0.9 * x).collect())),
        vals(T).prop_map(|v| Transition::ScalarPerStep(v.iter().map(|x| 0.9 * x).collect())),
    ]
}

fn tensor(v: Vec<f64>) -> Tensor3 {
    Tensor3::from_vec(T, N, P, v).unwrap()
}

fn scan(a: &Transition, u: &Tensor3, c: &Tensor3, h0: Option<&[f64]>) -> moe_ssm::ssm::ScanOutput {
    ssm_scan_sequential(a, u, c, h0, ScanOptions::default()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter()
        .zip(b)
        .all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn output_is_linear_in_drive(a in transition(), u1 in vals(T * N * P), u2 in vals(T * N * P),
                                 c in vals(T * N * P), alpha in -2.0f64..2.0) {
        let c = tensor(c);
        let sum: Vec<f64> = u1.iter().zip(&u2).map(|(x, y)| x + alpha * y).collect();
        let y1 = scan(&a, &tensor(u1), &c, None).y;
        let y2 = scan(&a, &tensor(u2), &c, None).y;
        let ys = scan(&a, &tensor(sum), &c, None).y;
        let expect: Vec<f64> = y1.as_slice().iter().zip(y2.as_slice()).map(|(x, y)| x + alpha * y).collect();
        prop_assert!(close(ys.as_slice(), &expect, 1e-12));
    }

    #[test]
    fn scaling_drive_and_initial_state_scales_output(a in transition(), u in vals(T * N * P),
                                                     c in vals(T * N * P), h0 in vals(N * P), s in -3.0f64..3.0) {
        let c = tensor(c);
        let base = scan(&a, &tensor(u.clone()), &c, Some(&h0));
        let su: Vec<f64> = u.iter().map(|v| s * v).collect();
        let sh: Vec<f64> = h0.iter().map(|v| s * v).collect();
        let scaled = scan(&a, &tensor(su), &c, Some(&sh));
        let expect: Vec<f64> = base.y.as_slice().iter().map(|v| s * v).collect();
        prop_assert!(close(scaled.y.as_slice(), &expect, 1e-12));
    }

    #[test]
    fn restarting_from_a_final_state_continues_the_scan(a in vals(N), u in vals(T * N * P),
                                                        c in vals(T * N * P), split in 1usize..T) {
        let a = Transition::Diagonal(a);
        let full = scan(&a, &tensor(u.clone()), &tensor(c.clone()), None);
        let cut = split * N * P;
        let head_u = Tensor3::from_vec(split, N, P, u[..cut].to_vec()).unwrap();
        let head_c = Tensor3::from_vec(split, N, P, c[..cut].to_vec()).unwrap();
        let tail_u = Tensor3::from_vec(T - split, N, P, u[cut..].to_vec()).unwrap();
        let tail_c = Tensor3::from_vec(T - split, N, P, c[cut..].to_vec()).unwrap();
        let head = scan(&a, &head_u, &head_c, None);
        let tail = scan(&a, &tail_u, &tail_c, Some(&head.final_state));
        prop_assert_eq!(&full.y.as_slice()[..split * P], head.y.as_slice());
        prop_assert_eq!(&full.y.as_slice()[split * P..], tail.y.as_slice());
        prop_assert_eq!(full.final_state, tail.final_state);
    }

    #[test]
    fn channels_are_independent(a in transition(), u in vals(T * N * P), c in vals(T * N * P)) {
        // Swap the two channels of every input; the outputs swap too.
        let swap = |v: &[f64]| -> Vec<f64> {
            v.chunks_exact(P).flat_map(|ch| [ch[1], ch[0]]).collect()
        };
        let y = scan(&a, &tensor(u.clone()), &tensor(c.clone()), None).y;
        let ys = scan(&a, &tensor(swap(&u)), &tensor(swap(&c)), None).y;
        prop_assert_eq!(swap(y.as_slice()), ys.as_slice().to_vec());
    }

    #[test]
    fn trajectory_final_state_matches(a in transition(), u in vals(T * N * P), c in vals(T * N * P)) {
        let out = scan(&a, &tensor(u), &tensor(c), None);
        let traj = out.trajectory().unwrap();
        prop_assert_eq!(traj.steps(), T);
        prop_assert_eq!(traj.final_state(), &out.final_state[..]);
        prop_assert!(traj.state(0).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn selective_ssm_uses_the_sequence_as_drive() {
    // B = 1, C = 1, diagonal a = 0.5, x = (1, 0, 0): y = (1, 0.5, 0.25).
    let streams = StreamSet::new(
        Tensor3::from_vec(3, 1, 1, vec![1.0; 3]).unwrap(),
        Tensor3::from_vec(3, 1, 1, vec![1.0; 3]).unwrap(),
        Matrix::zeros(3, 1),
    )
    .unwrap();
    let x = SequenceBatch::from_vec(3, 1, vec![1.0, 0.0, 0.0]).unwrap();
    let out = selective_ssm(
        &Transition::Diagonal(vec![0.5]),
        &streams,
        &x,
        None,
        ScanOptions::default(),
    )
    .unwrap();
    assert_eq!(out.y.as_slice(), &[1.0, 0.5, 0.25]);
}

#[test]
fn zoh_follows_the_closed_form() {
    // b̄ = (e^{aΔ} − 1)/a · b with a = −ln 2, Δ = 1, b = 1 gives 0.5 / ln 2.
    let inp = DiscretizationInput {
        a: vec![-std::f64::consts::LN_2],
        b: Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
        delta: 1.0,
    };
    let (a_bar, b_bar) = zoh_discretize(&inp).unwrap();
    assert!((a_bar[0] - 0.5).abs() < 1e-15);
    assert!((b_bar[(0, 0)] - 0.5 / std::f64::consts::LN_2).abs() < 1e-15);
}
