//! Acceptance gate for the reconstruction pipeline.
//!
//! Each criterion is a separate test named `criterion_N_*`, so the
//! harness prints exactly one pass/fail line per criterion. Tests also
//! print their measured evidence; run with `-- --nocapture` to see the
//! numbers on success (they are always shown on failure).
//!
//! Every threshold here is pinned: randomness is seeded, so a passing
//! suite keeps passing.

use std::sync::Arc;
use std::time::Instant;

use avatarforge_core::assets::make_default_subject;
use avatarforge_core::checks::{geometry_suite, grad_suite, raster_suite, CheckReport};
use avatarforge_core::losses::{
    iteration_total, psnr, sequence_total, IterationTerms, LossWeights,
};
use avatarforge_core::pipeline::clamp_bounds;
use avatarforge_core::{train_overfit, Config, Model, PartLabel, Tape};

/// Print every report, then fail with the first offender if any failed.
fn assert_reports(criterion: &str, reports: &[CheckReport], budget_s: f64, elapsed_s: f64) {
    for r in reports {
        println!(
            "  [{}] {} — {}",
            if r.pass { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
    }
    if let Some(bad) = reports.iter().find(|r| !r.pass) {
        panic!("{criterion}: {} failed — {}", bad.name, bad.detail);
    }
    assert!(
        elapsed_s <= budget_s,
        "{criterion}: took {elapsed_s:.1}s (budget {budget_s}s)"
    );
    println!(
        "{criterion}: PASS — {} checks in {elapsed_s:.1}s (budget {budget_s}s)",
        reports.len()
    );
}

#[test]
fn criterion_1_gradient_suite() {
    let t0 = Instant::now();
    let reports = grad_suite(10, 0xACCE_0001);
    // 10 repetitions over every op and block, each a distinct random shape.
    assert!(reports.len() >= 300, "only {} gradient checks ran", reports.len());
    assert_reports(
        "criterion 1 (gradient suite)",
        &reports,
        120.0,
        t0.elapsed().as_secs_f64(),
    );
}

#[test]
fn criterion_2_geometry_suite() {
    let t0 = Instant::now();
    let reports = geometry_suite(100, 0xACCE_0002);
    assert_reports(
        "criterion 2 (geometry suite)",
        &reports,
        120.0,
        t0.elapsed().as_secs_f64(),
    );
}

#[test]
fn criterion_3_roundtrip_suite() {
    let t0 = Instant::now();
    let reports = raster_suite(0xACCE_0003, 25, 20);
    assert_reports(
        "criterion 3 (round-trip suite)",
        &reports,
        180.0,
        t0.elapsed().as_secs_f64(),
    );
}

#[test]
fn criterion_4_clipping_constants() {
    // The constants themselves.
    let labels = [
        PartLabel::Face,
        PartLabel::Hair,
        PartLabel::Neck,
        PartLabel::Eyeball,
        PartLabel::Eyelid,
        PartLabel::Other,
    ];
    let expected = [0.003, 0.08, 0.02, 0.0, 0.0, 0.02];
    for (&l, &d) in labels.iter().zip(&expected) {
        assert_eq!(l.deformation_limit(), d, "budget for {l:?}");
    }

    // Boundary values through the actual clipping construct, per label
    // and per axis: an over-budget request lands exactly on the box
    // face, an at-budget request is admitted unchanged, an in-budget
    // request passes through untouched, and zero-budget parts are pinned
    // to their anchors bit-exactly.
    let anchors: Vec<[f64; 3]> = (0..labels.len())
        .map(|i| {
            let s = i as f64;
            [0.11 * s - 0.2, 0.05 * s + 0.01, 0.07 * s - 0.3]
        })
        .collect();
    let (lo, hi) = clamp_bounds::<f64>(&anchors, &labels);
    let flat: Vec<f64> = anchors.iter().flat_map(|p| p.iter().copied()).collect();

    let clip = |disp: Vec<f64>| -> Vec<f64> {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(disp, &[labels.len(), 3], true);
        let y = tape
            .clamp_st(x, Arc::new(lo.clone()), Arc::new(hi.clone()))
            .expect("clamp");
        tape.data(y).to_vec()
    };

    for axis in 0..3 {
        for sign in [1.0, -1.0] {
            // Over budget by a margin: must land exactly on the box face.
            let mut disp = flat.clone();
            for (i, &l) in labels.iter().enumerate() {
                disp[i * 3 + axis] += sign * (l.deformation_limit() + 0.01);
            }
            let out = clip(disp);
            for (i, &l) in labels.iter().enumerate() {
                for k in 0..3 {
                    let want = if k == axis {
                        if sign > 0.0 { hi[i * 3 + k] } else { lo[i * 3 + k] }
                    } else {
                        flat[i * 3 + k]
                    };
                    assert_eq!(
                        out[i * 3 + k],
                        want,
                        "overshoot: {l:?} axis {axis} sign {sign}"
                    );
                }
            }

            // Exactly at the budget: admitted unchanged.
            let mut disp = flat.clone();
            for i in 0..labels.len() {
                disp[i * 3 + axis] = if sign > 0.0 { hi[i * 3 + axis] } else { lo[i * 3 + axis] };
            }
            let out = clip(disp.clone());
            assert_eq!(out, disp, "boundary value must be admitted (axis {axis})");

            // Inside the budget: passes through bit-exactly.
            let mut disp = flat.clone();
            for (i, &l) in labels.iter().enumerate() {
                disp[i * 3 + axis] += sign * 0.4 * l.deformation_limit();
            }
            let out = clip(disp.clone());
            assert_eq!(out, disp, "in-budget request must pass (axis {axis})");
        }
    }
    println!(
        "criterion 4 (clipping constants): PASS — budgets {expected:?} enforced on all {} label/axis combinations",
        labels.len() * 3
    );
}

#[test]
fn criterion_5_loss_arithmetic() {
    let mut tape = Tape::<f64>::new();
    let one = tape.constant(vec![1.0], &[1]);

    // Two unit iteration losses under the 0.8 discount: 0.8 + 1.0.
    let seq = sequence_total(&mut tape, &[one, one], 0.8).expect("sequence");
    assert_eq!(tape.data(seq).len(), 1);
    assert_eq!(tape.data(seq)[0], 1.8f64, "discount schedule");

    // Five unit terms under the default weights: 1 + 1 + 1 + 0.5 + 2.
    let terms = IterationTerms {
        img: one,
        mask: one,
        normal: one,
        part: one,
        lap: one,
    };
    let tot = iteration_total(&mut tape, terms, &LossWeights::default()).expect("total");
    assert_eq!(tape.data(tot)[0], 5.5f64, "weighted sum");

    // The discount must depend on position, not identity: three unit
    // losses give 0.64 + 0.8 + 1.0.
    let seq3 = sequence_total(&mut tape, &[one, one, one], 0.8).expect("sequence");
    assert_eq!(
        tape.data(seq3)[0],
        0.8f64.powi(2) + 0.8 + 1.0,
        "three-term schedule"
    );

    println!("criterion 5 (loss arithmetic): PASS — (1,1) -> 1.8 exactly, unit terms -> 5.5 exactly");
}

const OVERFIT_STEPS: usize = 500;

#[test]
fn criterion_6_overfit_convergence() {
    let t0 = Instant::now();
    let cfg = Config::desk();
    let subject = make_default_subject(0, cfg.image_res).expect("subject");

    let mut model = Model::<f32>::new(cfg.clone()).expect("model");
    let report = train_overfit(&mut model, &subject, OVERFIT_STEPS, None).expect("train");

    // Step 0 is recorded before any update (and the warmup makes that
    // update a no-op), so row 0 is the untrained model.
    let first = &report.rows[0];
    let run = model.forward(&subject).expect("forward");
    let final_img = run.value(run.terms.last().expect("terms").img);
    let final_psnr = psnr(&run.final_render, &subject.input_image, &subject.fg_mask).expect("psnr");

    println!(
        "  L_img {:.6e} -> {:.6e} (ratio {:.3}, need <= 0.20)",
        first.l_img,
        final_img,
        final_img / first.l_img
    );
    println!(
        "  masked PSNR {:.2} dB -> {:.2} dB (gain {:+.2} dB, need >= +6)",
        first.psnr,
        final_psnr,
        final_psnr - first.psnr
    );
    assert!(
        final_img <= 0.20 * first.l_img,
        "L_img only reached {:.3}x of its initial value",
        final_img / first.l_img
    );
    assert!(
        final_psnr >= first.psnr + 6.0,
        "PSNR gain {:.2} dB is below 6 dB",
        final_psnr - first.psnr
    );

    // The same training twice is bit-for-bit reproducible.
    let mut model2 = Model::<f32>::new(cfg).expect("model");
    let report2 = train_overfit(&mut model2, &subject, OVERFIT_STEPS, None).expect("train");
    assert_eq!(report.rows, report2.rows, "metrics diverged between runs");
    for (id, id2) in model.store.ids().zip(model2.store.ids()) {
        let a = model.store.values(id);
        let b = model2.store.values(id2);
        assert!(
            a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
            "weights diverged between runs at {}",
            model.store.name(id)
        );
    }

    let elapsed = t0.elapsed().as_secs_f64();
    assert!(elapsed <= 1200.0, "took {elapsed:.0}s (budget 1200s)");
    println!(
        "criterion 6 (overfit convergence): PASS — {OVERFIT_STEPS} steps, deterministic twice, {elapsed:.0}s"
    );
}

const TREND_STEPS: usize = 120;

#[test]
fn criterion_7_iteration_trend() {
    let t0 = Instant::now();
    let mut wins = 0usize;
    let mut lines = Vec::new();

    for subject_seed in [0u64, 1, 2] {
        let subject = make_default_subject(subject_seed, 128).expect("subject");
        let mut finals = [0.0f64; 2];
        for (slot, iterations) in [(0usize, 1usize), (1, 2)] {
            let mut cfg = Config::desk();
            cfg.iterations = iterations;
            let mut model = Model::<f32>::new(cfg).expect("model");
            train_overfit(&mut model, &subject, TREND_STEPS, None).expect("train");
            // Final-iteration weighted loss: unlike the discounted
            // training objective (a sum over iterations), this measures
            // output quality on a scale shared by both configurations.
            let run = model.forward(&subject).expect("forward");
            finals[slot] = run.value(*run.iteration_totals.last().expect("totals"));
        }
        let better = finals[1] <= finals[0];
        wins += better as usize;
        lines.push(format!(
            "  seed {subject_seed}: one-iteration L_total {:.6e}, two-iteration L_total {:.6e} -> {}",
            finals[0],
            finals[1],
            if better { "two wins" } else { "one wins" }
        ));
    }
    for l in &lines {
        println!("{l}");
    }
    assert!(
        wins >= 2,
        "two-iteration refinement won only {wins}/3 seeds under a {TREND_STEPS}-step budget"
    );
    let elapsed = t0.elapsed().as_secs_f64();
    assert!(elapsed <= 3600.0, "took {elapsed:.0}s (budget 3600s)");
    println!(
        "criterion 7 (iteration trend): PASS — two-iteration refinement better on {wins}/3 seeds, {elapsed:.0}s"
    );
}

#[test]
fn criterion_8_invariant_suite() {
    let t0 = Instant::now();
    let subject = make_default_subject(11, 128).expect("subject");

    // (a) Prefix determinism: a one-iteration run is bit-identical to
    // the first iteration of a two-iteration run.
    let mut cfg1 = Config::desk();
    cfg1.iterations = 1;
    let m1 = Model::<f32>::new(cfg1).expect("model");
    let r1 = m1.forward(&subject).expect("forward");
    let m2 = Model::<f32>::new(Config::desk()).expect("model");
    let r2 = m2.forward(&subject).expect("forward");
    assert_eq!(r1.states[0].mesh.vertices, r2.states[0].mesh.vertices);
    assert_eq!(r1.states[0].texture.data, r2.states[0].texture.data);
    assert_eq!(r1.states[0].delta_v, r2.states[0].delta_v);
    assert_eq!(
        r1.value(r1.iteration_totals[0]).to_bits(),
        r2.value(r2.iteration_totals[0]).to_bits(),
        "first-iteration loss differs between prefix runs"
    );

    // (b) Part-bound safety at every iteration, (c) eye immobility:
    // exact assertions against the same box the forward pass clips
    // against.
    let model = Model::<f64>::new(Config::desk()).expect("model");
    let run = model.forward(&subject).expect("forward");
    assert_eq!(run.states.len(), 2);
    for st in &run.states {
        let (lo, hi) = clamp_bounds::<f64>(&st.clamp_anchors, &st.clamp_labels);
        assert!(
            st.delta_v.iter().any(|d| d.iter().any(|&x| x != 0.0)),
            "iteration {} proposed no displacement at all; the clip was never exercised",
            st.t
        );
        for (i, v) in st.clamped_vertices.iter().enumerate() {
            for k in 0..3 {
                assert!(
                    v[k] >= lo[i * 3 + k] && v[k] <= hi[i * 3 + k],
                    "iteration {} vertex {i} axis {k}: {} escapes [{}, {}]",
                    st.t,
                    v[k],
                    lo[i * 3 + k],
                    hi[i * 3 + k]
                );
            }
            if matches!(st.clamp_labels[i], PartLabel::Eyeball | PartLabel::Eyelid) {
                assert_eq!(
                    *v, st.clamp_anchors[i],
                    "eye vertex {i} moved at iteration {}",
                    st.t
                );
            }
        }
    }

    // (d) Gradient reach: every parameter tensor receives a nonzero
    // gradient from the full objective.
    let grads = run.tape.backward(run.loss).expect("backward");
    let collected = run.mounts.collect(&model.store, &grads);
    for (id, g) in model.store.ids().zip(&collected) {
        assert!(
            g.iter().any(|v| *v != 0.0),
            "parameter {} receives no gradient",
            model.store.name(id)
        );
    }

    let elapsed = t0.elapsed().as_secs_f64();
    assert!(elapsed <= 300.0, "took {elapsed:.0}s (budget 300s)");
    println!(
        "criterion 8 (invariant suite): PASS — prefix determinism, bound safety, eye immobility, gradient reach ({elapsed:.1}s)"
    );
}
