mod common;

use antipasto::losses::{antipasto_loss, antipasto_loss_tape, reference_pass, symlog, tv_budget, LossConfig, LossContext};
use antipasto::tensor::{check_gradients, Tape, Tensor, Var};

#[test]
fn identity_adapter_gives_margin_only() {
    let t = common::tiny(0.0);
    for margin in [0.0, 0.2] {
        let cfg = LossConfig { margin, ..Default::default() };
        let ctx = LossContext {
            model: &t.model,
            adapter: &t.adapter,
            subspace: &t.subspace,
            signals: &t.signals,
            cfg: &cfg,
        };
        let bd = antipasto_loss(&ctx, &t.pairs[0], 1.0).unwrap();
        assert_eq!(bd.b_coh, 0.0);
        assert!(bd.tv.iter().all(|&x| x == 0.0));
        assert_eq!(bd.delta_pos, 0.0);
        assert_eq!(bd.delta_neg, 0.0);
        assert_eq!(bd.l_proj, symlog(margin + margin.max(0.0).powi(2)));
        assert_eq!(bd.total, bd.l_proj + bd.b_mono);
    }
}

#[test]
fn warmup_gates_monotonicity() {
    let t = common::tiny(0.05);
    let ctx = LossContext {
        model: &t.model,
        adapter: &t.adapter,
        subspace: &t.subspace,
        signals: &t.signals,
        cfg: &t.loss,
    };
    let early = antipasto_loss(&ctx, &t.pairs[1], 0.25).unwrap();
    assert_eq!(early.b_mono, 0.0);
    assert_eq!(early.total, early.l_proj + early.b_coh);
    let late = antipasto_loss(&ctx, &t.pairs[1], 0.75).unwrap();
    assert!(late.b_mono > 0.0);
}

fn leaves(t: &common::Tiny) -> Vec<Tensor> {
    t.adapter.trainable().into_iter().cloned().collect()
}

fn handles(vs: &[Var]) -> Vec<(Var, Var)> {
    vs.chunks(2).map(|c| (c[0], c[1])).collect()
}

#[test]
fn full_loss_gradient_matches_finite_differences() {
    let mut t = common::tiny(0.3);
    t.subspace.fisher_w = vec![1.3, 0.6, 2.0, 0.9];
    let cfg = LossConfig {
        kappa: 0.002,
        gamma: 0.5,
        margin: 0.1,
        ..Default::default()
    };
    let ctx = LossContext {
        model: &t.model,
        adapter: &t.adapter,
        subspace: &t.subspace,
        signals: &t.signals,
        cfg: &cfg,
    };
    let pair = [&t.pairs[2]];
    let refs = reference_pass(&t.model, &pair, &t.signals).unwrap();
    let mut probe = Tape::new();
    let hv = antipasto::losses::register_adapter(&mut probe, &t.adapter);
    let (_, bd) = antipasto_loss_tape(&mut probe, &ctx, &hv, &pair, &refs, 1.0).unwrap();
    assert!(bd.b_coh > 0.0 && bd.b_mono > 0.0, "{bd:?}");
    let err = check_gradients(
        |tape, vs| Ok(antipasto_loss_tape(tape, &ctx, &handles(vs), &pair, &refs, 1.0)?.0.total),
        &leaves(&t),
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn satisfied_barriers_leave_projection_gradient_untouched() {
    let t = common::tiny(0.002);
    let cfg = LossConfig { gamma: 0.0, ..Default::default() };
    let ctx = LossContext {
        model: &t.model,
        adapter: &t.adapter,
        subspace: &t.subspace,
        signals: &t.signals,
        cfg: &cfg,
    };
    let pairs: Vec<_> = t.pairs[..3].iter().collect();
    let refs = reference_pass(&t.model, &pairs, &t.signals).unwrap();
    let mut tape = Tape::new();
    let h = antipasto::losses::register_adapter(&mut tape, &t.adapter);
    let (vars, bd) = antipasto_loss_tape(&mut tape, &ctx, &h, &pairs, &refs, 1.0).unwrap();
    let budget = tv_budget(0.0, &cfg);
    assert!(bd.tv.iter().all(|&x| x < budget), "{:?}", bd.tv);
    assert_eq!(bd.b_coh, 0.0);
    assert_eq!(bd.b_mono, 0.0);
    assert_eq!(bd.total, bd.l_proj);
    let g_total = tape.backward(vars.total).unwrap();
    let g_proj = tape.backward(vars.l_proj).unwrap();
    for &(a, d) in &h {
        for v in [a, d] {
            assert_eq!(g_total.get(v).unwrap(), g_proj.get(v).unwrap());
        }
    }
}
