//! A tiny random model with an adapter, and a fast invariant and gradient
//! suite over it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::adapter::{cayley, collect_calibration, AdapterConfig, AdapterState};
use crate::error::Result;
use crate::evalharness::steering_f1;
use crate::losses::{antipasto_loss_tape, monotonicity_barrier, reference_pass, register_adapter, symlog, tv_budget, LossConfig, LossContext};
use crate::microlm::{CorpusConfig, MicroLm, ModelConfig, World};
use crate::signals::{build_pairs, build_subspace, fisher_weights, ContrastPair, LossSubspace, SignalsConfig};
use crate::tensor::{check_gradients, Tensor, Var};

/// A 2-layer, d_model = 16 model with an adapter and loss subspace.
pub struct Tiny {
    pub world: World,
    pub model: MicroLm,
    pub pairs: Vec<ContrastPair>,
    pub adapter: AdapterState,
    pub subspace: LossSubspace,
    pub signals: SignalsConfig,
    pub loss: LossConfig,
}

pub fn tiny(init_scale: f64) -> Result<Tiny> {
    let world = World::new(&CorpusConfig::default())?;
    let model = MicroLm::new(ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: world.tokenizer.vocab_size(),
        max_seq: 32,
        seed: 5,
    })?;
    let pairs = build_pairs(&world, 40, 11)?;
    let cho: Vec<&[usize]> = pairs[..16].iter().map(|p| p.x_cho.as_slice()).collect();
    let rej: Vec<&[usize]> = pairs[..16].iter().map(|p| p.x_rej.as_slice()).collect();
    let calib = collect_calibration(&model, &cho, &rej)?;
    let adapter = AdapterState::build(
        &model,
        &calib,
        &AdapterConfig {
            rank: 3,
            init_scale,
            seed: 2,
            ..Default::default()
        },
    )?;
    let signals = SignalsConfig {
        subspace_rank: 4,
        taskdiff_rank: 8,
        suppressed_rank: 12,
        head_rank: 4,
        ..Default::default()
    };
    let subspace = build_subspace(&model, &pairs, &signals)?;
    Ok(Tiny {
        world,
        model,
        pairs,
        adapter,
        subspace,
        signals,
        loss: LossConfig::default(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn check(name: &'static str, pass: bool, detail: String) -> Check {
    Check { name, pass, detail }
}

fn random_skew(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let d = Normal::new(0.0, 1.0).expect("valid std");
    let mut a = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..i {
            let v = d.sample(rng);
            a.set(i, j, v);
            a.set(j, i, -v);
        }
    }
    a
}

fn cayley_check() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let a = random_skew(&mut rng, 5);
        for alpha in [-1.0, -0.5, 0.5, 1.0] {
            let r = cayley(&a, alpha, std::f64::consts::FRAC_PI_3)?;
            let rinv = cayley(&a, -alpha, std::f64::consts::FRAC_PI_3)?;
            worst = worst
                .max(r.t_matmul(&r)?.sub(&Tensor::eye(5))?.frobenius_norm())
                .max(rinv.matmul(&r)?.sub(&Tensor::eye(5))?.frobenius_norm());
        }
    }
    Ok(check("cayley orthogonality and reversibility", worst < 1e-10, format!("max residual {worst:.2e}")))
}

fn noop_check(t: &Tiny) -> Result<Check> {
    let mut worst: f64 = 0.0;
    for p in t.pairs.iter().take(5) {
        let base = t.model.forward(&p.x_cho, None, 0.0)?;
        let zero = t.model.forward(&p.x_cho, Some(&t.adapter), 0.0)?;
        worst = worst.max(base.logits.max_abs_diff(&zero.logits));
    }
    Ok(check("adapter at zero is a no-op", worst <= 1e-9, format!("max logit change {worst:.2e}")))
}

fn gradient_check(t: &Tiny) -> Result<Check> {
    let cfg = LossConfig {
        kappa: 0.002,
        gamma: 0.5,
        margin: 0.1,
        ..Default::default()
    };
    let mut subspace = t.subspace.clone();
    subspace.fisher_w = vec![1.3, 0.6, 2.0, 0.9];
    let ctx = LossContext {
        model: &t.model,
        adapter: &t.adapter,
        subspace: &subspace,
        signals: &t.signals,
        cfg: &cfg,
    };
    let pair = [&t.pairs[2]];
    let refs = reference_pass(&t.model, &pair, &t.signals)?;
    let leaves: Vec<Tensor> = t.adapter.trainable().into_iter().cloned().collect();
    let err = check_gradients(
        |tape, vs: &[Var]| {
            let h: Vec<(Var, Var)> = vs.chunks(2).map(|c| (c[0], c[1])).collect();
            Ok(antipasto_loss_tape(tape, &ctx, &h, &pair, &refs, 1.0)?.0.total)
        },
        &leaves,
        1e-6,
    )?;
    Ok(check("full loss gradient vs finite differences", err < 1e-3, format!("max relative error {err:.2e}")))
}

fn barrier_neutrality_check(t: &Tiny) -> Result<Check> {
    let mut identity = t.adapter.clone();
    identity.zero_params();
    let ctx = LossContext {
        model: &t.model,
        adapter: &identity,
        subspace: &t.subspace,
        signals: &t.signals,
        cfg: &t.loss,
    };
    let pairs: Vec<&ContrastPair> = t.pairs[..2].iter().collect();
    let refs = reference_pass(&t.model, &pairs, &t.signals)?;
    let mut tape = crate::tensor::Tape::new();
    let h = register_adapter(&mut tape, &identity);
    let (_, bd) = antipasto_loss_tape(&mut tape, &ctx, &h, &pairs, &refs, 0.0)?;
    Ok(check("identity adapter leaves the coherence barrier at zero", bd.b_coh == 0.0, format!("b_coh {}", bd.b_coh)))
}

fn closed_form_check() -> Check {
    let cfg = LossConfig::default();
    let h = 0.7;
    let errs = [
        (symlog(std::f64::consts::E - 1.0) - 1.0).abs(),
        (tv_budget(0.0, &cfg) - 0.3 * 0.1f64.sqrt()).abs(),
        (monotonicity_barrier(0.0, 0.0, 0.0, h, cfg.gamma) - 2.0 * (cfg.gamma * h).powi(2)).abs(),
    ];
    let worst = errs.iter().fold(0.0f64, |a, &b| a.max(b));
    check("closed-form loss values", worst < 1e-9, format!("max error {worst:.2e}"))
}

fn metric_check() -> Result<Check> {
    let f = steering_f1(4.0, 1.0, 1.0, 10.0, 1.0)?.f1;
    let zero = steering_f1(2.0, 2.0, 0.0, 10.0, 1.0)?.f1;
    let pos = Tensor::from_rows(&[vec![1.0], vec![1.0]])?;
    let neg = Tensor::from_rows(&[vec![0.0], vec![0.0]])?;
    let w = fisher_weights(&pos, &neg, 0.0025)?[0];
    let pass = (f - 300.0 / 7.0).abs() < 1e-6 && zero == 0.0 && (w - 20.0).abs() < 1e-9;
    Ok(check("steering F1 and Fisher weight oracles", pass, format!("F1 {f:.6}, zero-credit {zero}, w {w}")))
}

/// Runs every check; errors inside a check count as failures.
pub fn run() -> Vec<Check> {
    let mut out = vec![];
    let wrap = |name: &'static str, r: Result<Check>| r.unwrap_or_else(|e| check(name, false, e.to_string()));
    out.push(wrap("cayley orthogonality and reversibility", cayley_check()));
    out.push(closed_form_check());
    out.push(wrap("steering F1 and Fisher weight oracles", metric_check()));
    match tiny(0.3) {
        Ok(t) => {
            out.push(wrap("adapter at zero is a no-op", noop_check(&t)));
            out.push(wrap("full loss gradient vs finite differences", gradient_check(&t)));
            out.push(wrap("identity adapter leaves the coherence barrier at zero", barrier_neutrality_check(&t)));
        }
        Err(e) => out.push(check("tiny model setup", false, e.to_string())),
    }
    out
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        for c in super::run() {
            assert!(c.pass, "{}: {}", c.name, c.detail);
        }
    }
}
