mod common;

use common::*;
use cssbl::model::BlockStructure;
use cssbl::vbem::{raw_correlation_estimate, update_posteriors};

#[test]
fn single_group_estep_matches_dense_rederivation() {
    for seed in 0..50 {
        let inst = tiny_instance(seed, 4, 1);
        let err = engine_vs_oracle(&inst, false);
        assert!(err <= 1e-8, "seed {seed}: max deviation {err:e}");
    }
}

#[test]
fn two_group_estep_matches_dense_rederivation() {
    for seed in 100..140 {
        let inst = tiny_instance(seed, 5, 2);
        let err = engine_vs_oracle(&inst, true);
        assert!(err <= 1e-8, "seed {seed}: max deviation {err:e}");
    }
}

#[test]
fn posterior_m2_n3_against_dense_inverse() {
    // hand-built: M = 2, N = 3, fixed gamma, one group
    let mut inst = tiny_instance(7, 3, 1);
    while inst.model.m() != 2 || inst.structure.n() != 3 {
        inst = tiny_instance(inst.cfg.init_seed + 1000, 3, 1);
    }
    let oracle = oracle_step(&inst.state, &inst.phi(), inst.data.samples(), &inst.structure, &inst.hyper);
    let mut st = inst.state.clone();
    update_posteriors(&mut st, &inst.model, &inst.data, &inst.structure, &inst.cfg.tolerances).unwrap();
    for k in 0..st.num_samples() {
        assert!(max_abs_diff(&to_dense(&st.sigma[k]), &oracle.sigma[k]) <= 1e-8);
        assert!(vec_diff(&st.mu[k], &oracle.mu[k]) <= 1e-8);
    }
}

#[test]
fn raw_correlation_matches_weighted_second_moments() {
    for seed in 200..230 {
        let inst = tiny_instance(seed, 5, 2);
        if inst.structure.num_correlated() == 0 {
            continue;
        }
        let st = &inst.state;
        let range = inst.structure.range(0);
        let d = range.len();
        let mut want = vec![vec![0.0; d]; d];
        let mut mass = 0.0;
        for k in 0..st.num_samples() {
            for g in 0..st.num_groups() {
                let z = st.resp[(k, g)];
                let w = z * st.gamma_a[(g, 0)] / st.gamma_b[(g, 0)];
                mass += z;
                for i in 0..d {
                    for j in 0..d {
                        let (a, b) = (range.start + i, range.start + j);
                        want[i][j] += w * (st.mu[k][a] * st.mu[k][b] + st.sigma[k][(a, b)]);
                    }
                }
            }
        }
        let want: Dense = want
            .into_iter()
            .map(|r| r.into_iter().map(|v| v / mass).collect())
            .collect();
        let got = to_dense(&raw_correlation_estimate(st, &inst.structure, 0));
        assert!(max_abs_diff(&got, &want) <= 1e-12, "seed {seed}");
        assert!((mass - st.num_samples() as f64).abs() < 1e-12);
    }
}

#[test]
fn dense_oracle_sanity() {
    let a = vec![vec![4.0, 1.0], vec![1.0, 3.0]];
    let inv = inverse(&a);
    let id = matmul(&a, &inv);
    assert!(max_abs_diff(&id, &vec![vec![1.0, 0.0], vec![0.0, 1.0]]) < 1e-15);
    assert!((det(&a) - 11.0).abs() < 1e-12);
    let s = BlockStructure::with_lists(&[2], 3).unwrap();
    assert_eq!(spans(&s), vec![(0, 2), (2, 1)]);
}
