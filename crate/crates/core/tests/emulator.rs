mod common;

use common::{close, small_instance, Instance};
use mechemu_core::design::Origin;
use mechemu_core::emulator::dense::{dense_condition, prior_moments, DENSE_LIMIT};
use mechemu_core::emulator::kalman::condition;
use mechemu_core::error::Error;
use mechemu_core::{DesignSet, Emulator};

fn scales(inst: &Instance) -> (f64, f64) {
    let out = inst
        .design
        .outputs()
        .iter()
        .flat_map(|o| o.values())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let (_, cov) = prior_moments(
        &inst.model,
        &inst.aux,
        std::slice::from_ref(&inst.query),
        &inst.design.space().spans(),
    )
    .unwrap();
    (out, cov.diagonal().amax())
}

#[test]
fn kalman_matches_dense_conditioning() {
    for seed in 0..60 {
        let inst = small_instance(seed);
        let (out_scale, var_scale) = scales(&inst);
        let k = condition(&inst.design, &inst.model, &inst.aux, &inst.query).unwrap();
        let d = dense_condition(&inst.design, &inst.model, &inst.aux, &inst.query).unwrap();
        for i in 0..k.variance.len() {
            let (km, dm) = (k.mean.values()[i], d.mean.values()[i]);
            assert!(
                close(km, dm, 1e-8, out_scale),
                "seed {seed} step {i}: mean {km} vs {dm}"
            );
            let (kv, dv) = (k.variance[i], d.variance[i]);
            assert!(
                close(kv, dv, 1e-8, var_scale),
                "seed {seed} step {i}: variance {kv} vs {dv}"
            );
        }
    }
}

#[test]
fn fast_predictor_matches_kalman() {
    for seed in 100..140 {
        let inst = small_instance(seed);
        let (out_scale, var_scale) = scales(&inst);
        let fast = Emulator::build(&inst.design, &inst.model, inst.aux)
            .unwrap()
            .predict(&inst.query)
            .unwrap();
        let k = condition(&inst.design, &inst.model, &inst.aux, &inst.query).unwrap();
        for i in 0..k.variance.len() {
            // the filter carries a tiny observation jitter, the fast path none
            assert!(
                close(fast.mean.values()[i], k.mean.values()[i], 1e-6, out_scale),
                "seed {seed}"
            );
            assert!(close(fast.variance[i], k.variance[i], 1e-6, var_scale), "seed {seed}");
        }
    }
}

#[test]
fn design_points_are_interpolated() {
    for seed in 200..220 {
        let inst = small_instance(seed);
        let (out_scale, var_scale) = scales(&inst);
        let emu = Emulator::build(&inst.design, &inst.model, inst.aux).unwrap();
        for (p, y) in inst.design.points().iter().zip(inst.design.outputs()) {
            let pred = emu.predict(p).unwrap();
            for (m, v) in pred.mean.values().iter().zip(y.values()) {
                assert!((m - v).abs() <= 1e-6 * out_scale, "seed {seed}");
            }
            assert!(pred.variance.iter().all(|&v| v <= 1e-8 * var_scale), "seed {seed}");
        }
    }
}

#[test]
fn zero_sigma_reduces_to_linear_model() {
    let mut inst = small_instance(7);
    inst.aux.sigma = 0.0;
    let linear = inst.model.simulate(&inst.query, &inst.aux).unwrap();
    let fast = Emulator::build(&inst.design, &inst.model, inst.aux)
        .unwrap()
        .predict(&inst.query)
        .unwrap();
    let k = condition(&inst.design, &inst.model, &inst.aux, &inst.query).unwrap();
    assert_eq!(fast.mean, linear);
    assert_eq!(k.mean, linear);
    assert!(fast.variance.iter().all(|&v| v == 0.0));
}

#[test]
fn design_order_does_not_matter() {
    for seed in 300..310 {
        let inst = small_instance(seed);
        let (out_scale, var_scale) = scales(&inst);
        let mut reversed = DesignSet::new(inst.design.space().clone(), inst.design.overreach());
        for (p, y) in inst.design.points().iter().zip(inst.design.outputs()).rev() {
            reversed.push(p.clone(), Origin::Halton, y.clone()).unwrap();
        }
        let a = Emulator::build(&inst.design, &inst.model, inst.aux)
            .unwrap()
            .predict(&inst.query)
            .unwrap();
        let b = Emulator::build(&reversed, &inst.model, inst.aux)
            .unwrap()
            .predict(&inst.query)
            .unwrap();
        for i in 0..a.variance.len() {
            assert!(close(a.mean.values()[i], b.mean.values()[i], 1e-9, out_scale));
            assert!(close(a.variance[i], b.variance[i], 1e-9, var_scale));
        }
    }
}

#[test]
fn more_design_points_never_increase_variance() {
    for seed in 400..420 {
        let inst = small_instance(seed);
        let (_, var_scale) = scales(&inst);
        let mut last: Option<Vec<f64>> = None;
        for n in 1..=inst.design.len() {
            let emu = Emulator::build(&inst.design.prefix(n), &inst.model, inst.aux).unwrap();
            let var = emu.predict(&inst.query).unwrap().variance;
            if let Some(prev) = &last {
                for (now, before) in var.iter().zip(prev) {
                    assert!(*now <= before + 1e-10 * var_scale, "seed {seed}: {now} > {before}");
                }
            }
            last = Some(var);
        }
    }
}

#[test]
fn dense_oracle_refuses_large_problems() {
    let inst = small_instance(1);
    let mut design = inst.design.clone();
    let nt = inst.model.len();
    while design.len() * nt <= DENSE_LIMIT {
        let p = design.points()[0].iter().map(|x| x * 1.0001).collect();
        let y = design.outputs()[0].clone();
        design.push(p, Origin::Halton, y).unwrap();
    }
    let err = dense_condition(&design, &inst.model, &inst.aux, &inst.query).unwrap_err();
    assert!(matches!(err, Error::Refused(_)));
}
