//! The steering objective: anti-parallel projection loss, TV coherence
//! barrier and monotonicity barrier.

use crate::adapter::AdapterState;
use crate::config_section;
use crate::error::{Error, Result};
use crate::microlm::{MicroLm, Params};
use crate::signals::{fisher_weights, pooled_states, ContrastPair, LossSubspace, SignalsConfig};
use crate::tensor::{Gradients, Tape, Tensor, Var};

pub use crate::tensor::tape::symlog;

config_section!(
    LossConfig, "loss" {
        margin: f64 = 0.0,
        kappa: f64 = 0.3,
        beta: f64 = 0.1,
        lambda: f64 = 1.0,
        tau: f64 = 0.5,
        gamma: f64 = 0.1,
        warmup_frac: f64 = 0.5,
        /// Divide the cosine product by the full delta norms instead of
        /// using the concentration ratio and the squared hinge.
        pseudocode_variant: bool = false,
    }
);

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("kappa", self.kappa), ("beta", self.beta), ("lambda", self.lambda), ("tau", self.tau)] {
            if v <= 0.0 {
                return Err(Error::Config(format!("loss.{k} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Config("loss.warmup_frac must be in [0, 1]".into()));
        }
        Ok(())
    }
}

const NORM_FLOOR: f64 = 1e-8;
const DOMAIN_SHRINK: f64 = 1e-6;

/// Entropy in nats; `0·ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// TV budget `κ·sqrt(H + β)`.
pub fn tv_budget(h: f64, cfg: &LossConfig) -> f64 {
    cfg.kappa * (h + cfg.beta).sqrt()
}

/// Handles to the scalar diagnostics of one projection-loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct ProjectionVars {
    pub loss: Var,
    pub cos_pos: Var,
    pub cos_neg: Var,
    pub concentration: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ProjectionDiagnostics {
    pub cos_pos: f64,
    pub cos_neg: f64,
    pub concentration: f64,
}

fn coords(tape: &mut Tape, v: Var, basis: Var) -> Result<Var> {
    let d = tape.value(v).len();
    let k = tape.value(basis).cols();
    let row = tape.reshape(v, vec![1, d])?;
    let c = tape.matmul(row, basis)?;
    tape.reshape(c, vec![k])
}

/// Projection loss on a tape. `basis` is d×k, `w` holds k Fisher weights.
pub fn projection_loss_tape(
    tape: &mut Tape,
    d_ref: Var,
    delta_pos: Var,
    delta_neg: Var,
    basis: Var,
    w: Var,
    cfg: &LossConfig,
) -> Result<ProjectionVars> {
    let cr = coords(tape, d_ref, basis)?;
    let cp = coords(tape, delta_pos, basis)?;
    let cn = coords(tape, delta_neg, basis)?;
    let wr = tape.mul(cr, w)?;
    let wp = tape.mul(cp, w)?;
    let wn = tape.mul(cn, w)?;
    let cos_pos = tape.cosine_sim(wp, wr)?;
    let cos_neg = tape.cosine_sim(wn, wr)?;
    let cos = tape.mul(cos_pos, cos_neg)?;
    let full_pos = tape.norm(delta_pos, NORM_FLOOR)?;
    let full_neg = tape.norm(delta_neg, NORM_FLOOR)?;
    let full = tape.mul(full_pos, full_neg)?;
    let proj_pos = tape.norm(cp, NORM_FLOOR)?;
    let proj_neg = tape.norm(cn, NORM_FLOOR)?;
    let proj = tape.mul(proj_pos, proj_neg)?;
    let concentration = tape.div(proj, full)?;
    let loss = if cfg.pseudocode_variant {
        let den = tape.add_scalar(full, NORM_FLOOR);
        let s = tape.div(cos, den)?;
        let s = tape.add_scalar(s, cfg.margin);
        tape.symlog(s)
    } else {
        let a = tape.mul(cos, concentration)?;
        let z = tape.add_scalar(a, cfg.margin);
        let hinge = tape.relu(z);
        let hinge = tape.square(hinge);
        let inner = tape.add(z, hinge)?;
        tape.symlog(inner)
    };
    Ok(ProjectionVars {
        loss,
        cos_pos,
        cos_neg,
        concentration,
    })
}

/// Projection loss on plain vectors, weighted by `subspace.fisher_w`.
pub fn projection_loss(
    d_ref: &[f64],
    delta_pos: &[f64],
    delta_neg: &[f64],
    subspace: &LossSubspace,
    cfg: &LossConfig,
) -> Result<(f64, ProjectionDiagnostics)> {
    let mut tape = Tape::new();
    let r = tape.constant(Tensor::vector(d_ref.to_vec()));
    let p = tape.constant(Tensor::vector(delta_pos.to_vec()));
    let n = tape.constant(Tensor::vector(delta_neg.to_vec()));
    let b = tape.constant(subspace.basis.clone());
    let w = tape.constant(Tensor::vector(subspace.fisher_w.clone()));
    let v = projection_loss_tape(&mut tape, r, p, n, b, w, cfg)?;
    let diag = ProjectionDiagnostics {
        cos_pos: tape.item(v.cos_pos),
        cos_neg: tape.item(v.cos_neg),
        concentration: tape.item(v.concentration),
    };
    let l = tape.item(v.loss);
    if !l.is_finite() {
        return Err(Error::Numerical(format!("non-finite projection loss ({diag:?})")));
    }
    Ok((l, diag))
}

fn check_distributions(name: &str, t: &Tensor) -> Result<()> {
    for i in 0..t.rows() {
        let s: f64 = t.row(i).iter().sum();
        if (s - 1.0).abs() > 1e-8 || t.row(i).iter().any(|&x| x < 0.0) {
            return Err(Error::Input(format!("{name} row {i} is not a probability vector (sums to {s})")));
        }
    }
    Ok(())
}

/// Coherence barrier on a tape. `p_ref` (N×V) is a constant reference;
/// `p_pi` is the steered distribution. Returns the barrier and per-token TV.
pub fn coherence_barrier_tape(tape: &mut Tape, p_ref: &Tensor, p_pi: Var, cfg: &LossConfig) -> Result<(Var, Vec<f64>)> {
    check_distributions("p_ref", p_ref)?;
    check_distributions("p_pi", tape.value(p_pi))?;
    if p_ref.shape() != tape.value(p_pi).shape() {
        return Err(Error::dim("coherence_barrier", p_ref.shape(), tape.value(p_pi).shape()));
    }
    let vocab = p_ref.cols() as f64;
    let theta: Vec<f64> = (0..p_ref.rows()).map(|i| tv_budget(entropy(p_ref.row(i)), cfg)).collect();
    let pr = tape.constant(p_ref.clone());
    let diff = tape.sub(p_pi, pr)?;
    let diff = tape.abs(diff);
    let tv = tape.mean_axis(diff, 1)?;
    let tv = tape.scale(tv, 0.5 * vocab);
    let tvs = tape.value(tv).data().to_vec();
    let th = tape.constant(Tensor::vector(theta.clone()));
    let v = tape.sub(tv, th)?;
    let v = tape.relu(v);
    // past the barrier wall the value is pinned just inside it while the
    // gradient still flows
    let overshoot: Vec<f64> = tape
        .value(v)
        .data()
        .iter()
        .zip(&theta)
        .map(|(&vt, &t)| (vt - (1.0 - t) * (1.0 - DOMAIN_SHRINK)).max(0.0))
        .collect();
    let over = tape.constant(Tensor::vector(overshoot));
    let v = tape.sub(v, over)?;
    let inv: Vec<f64> = theta.iter().map(|&t| if t < 1.0 { 1.0 / (1.0 - t) } else { 0.0 }).collect();
    let inv = tape.constant(Tensor::vector(inv));
    let u = tape.mul(v, inv)?;
    let u = tape.neg(u);
    let u = tape.add_scalar(u, 1.0);
    let phi = tape.ln(u);
    let phi = tape.scale(phi, -cfg.lambda / cfg.tau);
    let lme = tape.log_mean_exp(phi);
    Ok((tape.scale(lme, cfg.tau), tvs))
}

/// Coherence barrier on plain distributions.
pub fn coherence_barrier(p_ref: &Tensor, p_pi: &Tensor, cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let p = tape.constant(p_pi.clone());
    let (b, tv) = coherence_barrier_tape(&mut tape, p_ref, p, cfg)?;
    Ok((tape.item(b), tv))
}

/// Squared-hinge ordering barrier on preference-gap shifts `Δ₊`, `Δ₋` with
/// margin `mu`; the cheaper of the two orderings is charged.
pub fn monotonicity_barrier_tape(tape: &mut Tape, d_pos: Var, d_neg: Var, mu: f64) -> Result<Var> {
    let hinge_sq = |tape: &mut Tape, x: Var, sign: f64| {
        let y = tape.scale(x, sign);
        let y = tape.add_scalar(y, mu);
        let y = tape.relu(y);
        tape.square(y)
    };
    let a = hinge_sq(tape, d_pos, -1.0);
    let b = hinge_sq(tape, d_neg, 1.0);
    let forward = tape.add(a, b)?;
    let c = hinge_sq(tape, d_pos, 1.0);
    let d = hinge_sq(tape, d_neg, -1.0);
    let reverse = tape.add(c, d)?;
    let gap = tape.sub(forward, reverse)?;
    let excess = tape.relu(gap);
    tape.sub(forward, excess)
}

pub fn monotonicity_barrier(gap_ref: f64, gap_pos: f64, gap_neg: f64, h_ref: f64, gamma: f64) -> f64 {
    let mu = gamma * h_ref;
    let h = |x: f64| x.max(0.0).powi(2);
    let (dp, dn) = (gap_pos - gap_ref, gap_neg - gap_ref);
    let forward = h(mu - dp) + h(mu + dn);
    let reverse = h(mu + dp) + h(mu - dn);
    forward.min(reverse)
}

/// Per-pair quantities at α = 0, computed outside the gradient tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Reference {
    pub h_cho: Vec<f64>,
    pub h_rej: Vec<f64>,
    /// Next-token distributions along `x_cho` (one row per position).
    pub p_ref: Tensor,
    pub mean_entropy: f64,
    pub gap: f64,
}

fn targets(len: usize, seq: &[usize]) -> Vec<Option<usize>> {
    (0..len).map(|i| seq.get(i + 1).copied()).collect()
}

/// Pooled states, preference gap and `x_cho` next-token distributions of
/// each pair under the unadapted model.
pub fn reference_pass(model: &MicroLm, pairs: &[&ContrastPair], signals: &SignalsConfig) -> Result<Vec<Reference>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(32) {
        let mut tape = Tape::new();
        let p = model.register(&mut tape, false);
        let seqs: Vec<&[usize]> = chunk.iter().flat_map(|c| [c.x_cho.as_slice(), c.x_rej.as_slice()]).collect();
        let tr = model.forward_tape(&mut tape, &p, &seqs)?;
        let pooled = pooled_states(&mut tape, &tr, signals.layers(model), signals.token_frac)?;
        let stream = sequence_terms(&mut tape, tr.logits, &tr.spans, &seqs)?;
        for (i, _) in chunk.iter().enumerate() {
            let (lsm, nll_cho) = stream[2 * i];
            let (_, nll_rej) = stream[2 * i + 1];
            let p_ref = tape.value(lsm).map(f64::exp);
            let mean_entropy = (0..p_ref.rows()).map(|r| entropy(p_ref.row(r))).sum::<f64>() / p_ref.rows() as f64;
            out.push(Reference {
                h_cho: tape.value(pooled[2 * i]).data().to_vec(),
                h_rej: tape.value(pooled[2 * i + 1]).data().to_vec(),
                p_ref,
                mean_entropy,
                gap: tape.item(nll_rej) - tape.item(nll_cho),
            });
        }
    }
    Ok(out)
}

/// Per sequence: row-wise log-softmax of its logits and its mean next-token
/// NLL.
pub(crate) fn sequence_terms(tape: &mut Tape, logits: Var, spans: &[(usize, usize)], seqs: &[&[usize]]) -> Result<Vec<(Var, Var)>> {
    spans
        .iter()
        .zip(seqs)
        .map(|(&(start, len), s)| {
            let rows: Vec<usize> = (start..start + len).collect();
            let l = tape.select_rows(logits, &rows)?;
            let lsm = tape.log_softmax(l);
            let nll = tape.cross_entropy(l, &targets(len, s))?;
            Ok((lsm, nll))
        })
        .collect()
}

/// Loss terms and diagnostics for one batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_proj: f64,
    pub b_coh: f64,
    pub b_mono: f64,
    pub total: f64,
    pub cos_pos: f64,
    pub cos_neg: f64,
    pub concentration: f64,
    /// Per-token TV, α = +1 then α = −1, pair by pair.
    pub tv: Vec<f64>,
    /// Mean preference-gap shifts `Δ₊`, `Δ₋`.
    pub delta_pos: f64,
    pub delta_neg: f64,
    /// Fisher weights used for this batch.
    pub fisher_w: Vec<f64>,
}

/// Everything the loss needs besides the adapter parameters.
#[derive(Clone, Copy, Debug)]
pub struct LossContext<'a> {
    pub model: &'a MicroLm,
    pub adapter: &'a AdapterState,
    pub subspace: &'a LossSubspace,
    pub signals: &'a SignalsConfig,
    pub cfg: &'a LossConfig,
}

/// Model parameters with every adapted writer replaced by `W'(α)` built
/// from the given `(A, ΔS)` handles.
pub fn steered_params(tape: &mut Tape, model: &MicroLm, adapter: &AdapterState, handles: &[(Var, Var)], alpha: f64) -> Result<Params<Var>> {
    let mut p = model.register(tape, false);
    for (m, &(a, ds)) in adapter.modules.iter().zip(handles) {
        let base = *p.writer(m.writer);
        let w = m.steered_weight_tape(tape, base, a, ds, alpha, adapter.theta_max)?;
        *p.writer_mut(m.writer) = w;
    }
    Ok(p)
}

/// Tape handles of the loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub l_proj: Var,
    pub b_coh: Var,
    pub b_mono: Option<Var>,
}

struct Pass {
    pooled: Vec<Var>,
    streams: Vec<(Var, Var)>,
}

/// Builds the full batch loss on `tape`. `handles` are `(A, ΔS)` per module
/// and `refs` the matching α = 0 references.
pub fn antipasto_loss_tape(
    tape: &mut Tape,
    ctx: &LossContext,
    handles: &[(Var, Var)],
    pairs: &[&ContrastPair],
    refs: &[Reference],
    step_frac: f64,
) -> Result<(LossVars, LossBreakdown)> {
    if pairs.is_empty() || pairs.len() != refs.len() {
        return Err(Error::Input(format!("{} pairs with {} references", pairs.len(), refs.len())));
    }
    if !(0.0..=1.0).contains(&step_frac) {
        return Err(Error::Input(format!("step_frac {step_frac} outside [0, 1]")));
    }
    let model = ctx.model;
    let seqs: Vec<&[usize]> = pairs.iter().flat_map(|c| [c.x_cho.as_slice(), c.x_rej.as_slice()]).collect();
    let mut passes = Vec::with_capacity(2);
    for alpha in [1.0, -1.0] {
        let p = steered_params(tape, model, ctx.adapter, handles, alpha)?;
        let tr = model.forward_tape(tape, &p, &seqs)?;
        let pooled = pooled_states(tape, &tr, ctx.signals.layers(model), ctx.signals.token_frac)?;
        let streams = sequence_terms(tape, tr.logits, &tr.spans, &seqs)?;
        passes.push(Pass { pooled, streams });
    }

    let n = pairs.len();
    let mut deltas = [Vec::with_capacity(n), Vec::with_capacity(n)];
    let mut d_refs = Vec::with_capacity(n);
    for (i, r) in refs.iter().enumerate() {
        let d_ref: Vec<f64> = r.h_cho.iter().zip(&r.h_rej).map(|(a, b)| a - b).collect();
        let d_ref = tape.constant(Tensor::vector(d_ref));
        for (k, pass) in passes.iter().enumerate() {
            let diff = tape.sub(pass.pooled[2 * i], pass.pooled[2 * i + 1])?;
            deltas[k].push(tape.sub(diff, d_ref)?);
        }
        d_refs.push(d_ref);
    }

    let fisher_w = if n >= 2 {
        let coords = |tape: &Tape, vs: &[Var]| {
            let rows: Vec<Vec<f64>> = vs.iter().map(|&v| ctx.subspace.coords(tape.value(v).data())).collect();
            Tensor::from_rows(&rows)
        };
        let pos = coords(tape, &deltas[0])?;
        let neg = coords(tape, &deltas[1])?;
        fisher_weights(&pos, &neg, ctx.signals.fisher_eps)?
            .into_iter()
            .map(|w| w.max(ctx.subspace.fisher_floor))
            .collect()
    } else {
        ctx.subspace.fisher_w.clone()
    };
    let basis = tape.constant(ctx.subspace.basis.clone());
    let w = tape.constant(Tensor::vector(fisher_w.clone()));

    let mut bd = LossBreakdown {
        fisher_w,
        ..Default::default()
    };
    let mut proj_terms = Vec::with_capacity(n);
    let mut coh_terms = Vec::with_capacity(2 * n);
    let mut mono_terms = Vec::with_capacity(n);
    let mono_on = step_frac >= ctx.cfg.warmup_frac;
    for i in 0..n {
        let pv = projection_loss_tape(tape, d_refs[i], deltas[0][i], deltas[1][i], basis, w, ctx.cfg)?;
        bd.cos_pos += tape.item(pv.cos_pos) / n as f64;
        bd.cos_neg += tape.item(pv.cos_neg) / n as f64;
        bd.concentration += tape.item(pv.concentration) / n as f64;
        proj_terms.push(pv.loss);

        for pass in &passes {
            let p_pi = tape.exp(pass.streams[2 * i].0);
            let (b, tv) = coherence_barrier_tape(tape, &refs[i].p_ref, p_pi, ctx.cfg)?;
            bd.tv.extend(tv);
            coh_terms.push(b);
        }

        let gap = |tape: &mut Tape, pass: &Pass| {
            let g = tape.sub(pass.streams[2 * i + 1].1, pass.streams[2 * i].1)?;
            Ok::<_, Error>(tape.add_scalar(g, -refs[i].gap))
        };
        let dp = gap(tape, &passes[0])?;
        let dn = gap(tape, &passes[1])?;
        bd.delta_pos += tape.item(dp) / n as f64;
        bd.delta_neg += tape.item(dn) / n as f64;
        if mono_on {
            mono_terms.push(monotonicity_barrier_tape(tape, dp, dn, ctx.cfg.gamma * refs[i].mean_entropy)?);
        }
    }
    let mean = |tape: &mut Tape, xs: &[Var]| -> Result<Var> {
        let s = tape.stack(xs)?;
        let s = tape.sum(s);
        Ok(tape.scale(s, 1.0 / n as f64))
    };
    let l_proj = mean(tape, &proj_terms)?;
    let b_coh = mean(tape, &coh_terms)?;
    let mut total = tape.add(l_proj, b_coh)?;
    bd.l_proj = tape.item(l_proj);
    bd.b_coh = tape.item(b_coh);
    let mut b_mono = None;
    if mono_on {
        let b = mean(tape, &mono_terms)?;
        bd.b_mono = tape.item(b);
        total = tape.add(total, b)?;
        b_mono = Some(b);
    }
    bd.total = tape.item(total);
    if !bd.total.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss: l_proj {} b_coh {} b_mono {} cos+ {} cos- {}",
            bd.l_proj, bd.b_coh, bd.b_mono, bd.cos_pos, bd.cos_neg
        )));
    }
    Ok((LossVars { total, l_proj, b_coh, b_mono }, bd))
}

/// Registers the adapter's parameters as trainable leaves on `tape`.
pub fn register_adapter(tape: &mut Tape, adapter: &AdapterState) -> Vec<(Var, Var)> {
    adapter
        .modules
        .iter()
        .map(|m| (tape.param(m.a_params.clone()), tape.param(m.ds.clone())))
        .collect()
}

/// Batch loss and its gradient for every trainable adapter tensor, in the
/// order of [`AdapterState::trainable`].
pub fn loss_and_grads(ctx: &LossContext, pairs: &[&ContrastPair], refs: &[Reference], step_frac: f64) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let handles = register_adapter(&mut tape, ctx.adapter);
    let (vars, bd) = antipasto_loss_tape(&mut tape, ctx, &handles, pairs, refs, step_frac)?;
    let mut grads: Gradients = tape.backward(vars.total)?;
    let g = handles
        .iter()
        .flat_map(|&(a, d)| [a, d])
        .map(|v| grads.take(v).expect("leaf gradient"))
        .collect();
    Ok((bd, g))
}

/// Loss for a single pair.
pub fn antipasto_loss(ctx: &LossContext, pair: &ContrastPair, step_frac: f64) -> Result<LossBreakdown> {
    let refs = reference_pass(ctx.model, &[pair], ctx.signals)?;
    let mut tape = Tape::new();
    let handles = register_adapter(&mut tape, ctx.adapter);
    Ok(antipasto_loss_tape(&mut tape, ctx, &handles, &[pair], &refs, step_frac)?.1)
}
