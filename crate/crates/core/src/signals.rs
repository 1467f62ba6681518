//! Contrast pairs, pooled hidden states, the loss subspace and Fisher
//! weights.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adapter::AdapterState;
use crate::config_section;
use crate::error::{Error, Result};
use crate::microlm::corpus::{Persona, Topic, World, N_FILLERS, PERSONA_PHRASINGS};
use crate::microlm::{MicroLm, TraceVars};
use crate::tensor::{svd, Tape, Tensor, Var};

config_section!(
    SignalsConfig, "signals" {
        n_pairs: usize = 800,
        /// First residual snapshot included in pooled states.
        layer_start: usize = 2,
        /// Fraction of final prompt positions averaged into pooled states.
        token_frac: f64 = 0.25,
        subspace_rank: usize = 8,
        taskdiff_rank: usize = 16,
        suppressed_rank: usize = 32,
        /// Number of head directions removed from the suppressed signal.
        head_rank: usize = 16,
        fisher_eps: f64 = 0.0025,
        fisher_floor: f64 = 1e-3,
    }
);

impl SignalsConfig {
    pub fn validate(&self, model: &MicroLm) -> Result<()> {
        let n = model.cfg.n_layers;
        if self.layer_start == 0 || self.layer_start > n {
            return Err(Error::Config(format!("signals.layer_start must be in 1..={n}")));
        }
        if !(self.token_frac > 0.0 && self.token_frac <= 1.0) {
            return Err(Error::Config("signals.token_frac must be in (0, 1]".into()));
        }
        if self.subspace_rank == 0 || self.subspace_rank > model.cfg.d_model {
            return Err(Error::Config(format!("signals.subspace_rank must be in 1..={}", model.cfg.d_model)));
        }
        if self.fisher_floor <= 0.0 || self.fisher_eps <= 0.0 {
            return Err(Error::Config("signals.fisher_floor and signals.fisher_eps must be positive".into()));
        }
        Ok(())
    }

    /// Residual snapshots that are pooled.
    pub fn layers(&self, model: &MicroLm) -> Range<usize> {
        self.layer_start..model.cfg.n_layers + 1
    }
}

/// Two prompts that differ only in the persona word and stop before any
/// answer token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContrastPair {
    pub x_cho: Vec<usize>,
    pub x_rej: Vec<usize>,
    pub persona_position: usize,
    pub question_id: String,
}

/// Samples `n_pairs` honest/dishonest pairs over the training facts.
pub fn build_pairs(world: &World, n_pairs: usize, seed: u64) -> Result<Vec<ContrastPair>> {
    if n_pairs == 0 {
        return Err(Error::Config("n_pairs must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_pairs)
        .map(|_| {
            let fact = rng.random_range(world.train_facts());
            let phrasing = PERSONA_PHRASINGS[rng.random_range(0..PERSONA_PHRASINGS.len())];
            let filler = rng.random_range(0..N_FILLERS);
            let topic = Topic::Fact { fact, phrasing };
            let x_cho = world.tokenizer.encode(&world.question_text(Some(Persona::Honest), filler, &topic))?;
            let x_rej = world.tokenizer.encode(&world.question_text(Some(Persona::Dishonest), filler, &topic))?;
            let persona_position = x_cho
                .iter()
                .zip(&x_rej)
                .position(|(a, b)| a != b)
                .expect("persona words differ");
            Ok(ContrastPair {
                x_cho,
                x_rej,
                persona_position,
                question_id: format!("fact{fact}.p{phrasing}.f{filler}"),
            })
        })
        .collect()
}

#[derive(Serialize)]
struct PairRecord<'a> {
    question_id: &'a str,
    chosen: String,
    rejected: String,
}

/// One JSON object per line: `question_id`, `chosen`, `rejected`.
pub fn pairs_to_jsonl(world: &World, pairs: &[ContrastPair]) -> Result<String> {
    let mut out = String::new();
    for p in pairs {
        let rec = PairRecord {
            question_id: &p.question_id,
            chosen: world.tokenizer.decode(&p.x_cho)?,
            rejected: world.tokenizer.decode(&p.x_rej)?,
        };
        out.push_str(&serde_json::to_string(&rec).map_err(|e| Error::Format(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

/// Final `ceil(frac·len)` positions of a sequence (at least one).
pub fn window(len: usize, frac: f64) -> Range<usize> {
    let w = ((frac * len as f64).ceil() as usize).clamp(1, len);
    len - w..len
}

/// One pooled d_model vector per packed sequence: the mean over the pooled
/// residual snapshots and the final window of positions.
pub fn pooled_states(tape: &mut Tape, trace: &TraceVars, layers: Range<usize>, frac: f64) -> Result<Vec<Var>> {
    let n_layers = layers.len();
    if n_layers == 0 || layers.end > trace.residuals.len() {
        return Err(Error::Config(format!(
            "pooled layers {layers:?} outside 0..{}",
            trace.residuals.len()
        )));
    }
    let mut acc = trace.residuals[layers.start];
    for l in layers.start + 1..layers.end {
        acc = tape.add(acc, trace.residuals[l])?;
    }
    let acc = tape.scale(acc, 1.0 / n_layers as f64);
    trace
        .spans
        .iter()
        .map(|&(start, len)| {
            let rows: Vec<usize> = window(len, frac).map(|i| start + i).collect();
            let sel = tape.select_rows(acc, &rows)?;
            tape.mean_axis(sel, 0)
        })
        .collect()
}

/// Pooled `(h_cho, h_rej)` for one pair at coefficient `alpha`.
pub fn extract_states(
    model: &MicroLm,
    pair: &ContrastPair,
    adapter: Option<&AdapterState>,
    alpha: f64,
    cfg: &SignalsConfig,
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let p = model.register_steered(&mut tape, adapter, alpha)?;
    let tr = model.forward_tape(&mut tape, &p, &[&pair.x_cho, &pair.x_rej])?;
    let h = pooled_states(&mut tape, &tr, cfg.layers(model), cfg.token_frac)?;
    Ok((tape.value(h[0]).clone(), tape.value(h[1]).clone()))
}

/// Window means of every residual snapshot, per sequence: `[seq][layer][d]`.
fn snapshot_means(model: &MicroLm, seqs: &[&[usize]], frac: f64) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(64) {
        let mut tape = Tape::new();
        let p = model.register(&mut tape, false);
        let tr = model.forward_tape(&mut tape, &p, chunk)?;
        for &(start, len) in &tr.spans {
            let w = window(len, frac);
            let n = w.len() as f64;
            let per_layer = tr
                .residuals
                .iter()
                .map(|&r| {
                    let t = tape.value(r);
                    let mut m = vec![0.0; t.cols()];
                    for i in w.clone() {
                        for (a, b) in m.iter_mut().zip(t.row(start + i)) {
                            *a += b;
                        }
                    }
                    m.iter_mut().for_each(|a| *a /= n);
                    m
                })
                .collect();
            out.push(per_layer);
        }
    }
    Ok(out)
}

fn mean_of(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; rows[0].len()];
    for r in rows {
        for (a, b) in m.iter_mut().zip(r) {
            *a += b;
        }
    }
    let n = rows.len() as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}

/// Top-`k` principal directions (d×k) of the sample rows, without centering.
/// Directions whose singular value is negligible are dropped.
pub fn principal_directions(samples: &Tensor, k: usize) -> Result<Tensor> {
    let s = svd(samples)?;
    let top = s.s.first().copied().unwrap_or(0.0);
    let keep: Vec<usize> = (0..k.min(s.s.len())).filter(|&i| s.s[i] > 1e-12 * top && s.s[i] > 0.0).collect();
    Ok(s.v.select_columns(&keep))
}

/// `Q·Qᵀ` for a matrix with orthonormal columns.
pub fn projector(q: &Tensor) -> Tensor {
    q.matmul_t(q).expect("square by construction")
}

fn apply(p: &Tensor, v: &[f64]) -> Vec<f64> {
    (0..p.rows()).map(|i| crate::tensor::dot(p.row(i), v)).collect()
}

/// Projector onto the strongest `m` input directions of the output head
/// (including the final norm gain).
pub fn head_projector(model: &MicroLm, m: usize) -> Result<Tensor> {
    let gain = model.params.final_gain.data();
    let mut read = model.params.head.clone();
    let d = read.cols();
    for row in read.data_mut().chunks_mut(d) {
        for (v, g) in row.iter_mut().zip(gain) {
            *v *= g;
        }
    }
    Ok(projector(&principal_directions(&read, m)?))
}

/// Projector onto the numerical column span of all residual writers.
pub fn write_projector(model: &MicroLm) -> Result<Tensor> {
    let d = model.cfg.d_model;
    let mut gram = Tensor::zeros(&[d, d]);
    for id in model.residual_writers() {
        let w = model.params.writer(id);
        gram = gram.add(&w.matmul_t(w)?)?;
    }
    let s = svd(&gram)?;
    let top = s.s.first().copied().unwrap_or(0.0);
    let keep: Vec<usize> = (0..d).filter(|&i| s.s[i] > 1e-12 * top && s.s[i] > 0.0).collect();
    Ok(projector(&s.u.select_columns(&keep)))
}

/// `Σ relu(Δh_l) − Σ relu(−Δh_l)` minus its projection onto the head's
/// read directions.
pub fn suppressed_vector(deltas: &[Vec<f64>], head_proj: &Tensor) -> Vec<f64> {
    let d = head_proj.rows();
    let mut s = vec![0.0; d];
    for dh in deltas {
        for (a, &x) in s.iter_mut().zip(dh) {
            *a += x.max(0.0);
            *a -= (-x).max(0.0);
        }
    }
    let read = apply(head_proj, &s);
    s.iter().zip(read).map(|(a, b)| a - b).collect()
}

/// Orthonormal basis of the directions used by the projection loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LossSubspace {
    /// d_model × k, orthonormal columns.
    pub basis: Tensor,
    /// Latest Fisher weights (one per basis vector), floored.
    pub fisher_w: Vec<f64>,
    pub fisher_floor: f64,
    /// Per basis vector: norms of its projections onto the taskdiff,
    /// suppressed and write spans.
    pub provenance: Vec<[f64; 3]>,
}

impl LossSubspace {
    pub fn from_basis(basis: Tensor, fisher_floor: f64) -> Self {
        let k = basis.cols();
        LossSubspace {
            basis,
            fisher_w: vec![1.0; k],
            fisher_floor,
            provenance: vec![[1.0; 3]; k],
        }
    }

    pub fn rank(&self) -> usize {
        self.basis.cols()
    }

    /// Coordinates `Bᵀv`.
    pub fn coords(&self, v: &[f64]) -> Vec<f64> {
        (0..self.rank())
            .map(|j| (0..v.len()).map(|i| self.basis.get(i, j) * v[i]).sum())
            .collect()
    }

    /// `B·Bᵀ·v`
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        let c = self.coords(v);
        (0..v.len())
            .map(|i| (0..c.len()).map(|j| self.basis.get(i, j) * c[j]).sum())
            .collect()
    }

    pub fn set_fisher(&mut self, w: &[f64]) {
        self.fisher_w = w.iter().map(|&x| x.max(self.fisher_floor)).collect();
    }
}

/// Builds the loss subspace from the α = 0 states of `pairs`: the top-k left
/// singular vectors of `P_write·P_supp·P_task`.
pub fn build_subspace(model: &MicroLm, pairs: &[ContrastPair], cfg: &SignalsConfig) -> Result<LossSubspace> {
    cfg.validate(model)?;
    let k = cfg.subspace_rank;
    if pairs.len() < 4 * k {
        return Err(Error::Config(format!(
            "subspace rank {k} needs at least {} pairs, got {}",
            4 * k,
            pairs.len()
        )));
    }
    let d = model.cfg.d_model;
    let layers = cfg.layers(model);
    let seqs: Vec<&[usize]> = pairs.iter().flat_map(|p| [p.x_cho.as_slice(), p.x_rej.as_slice()]).collect();
    let means = snapshot_means(model, &seqs, cfg.token_frac)?;
    let pooled: Vec<Vec<f64>> = means.iter().map(|m| mean_of(&m[layers.clone()])).collect();

    let diffs: Vec<f64> = pooled
        .chunks(2)
        .flat_map(|c| c[0].iter().zip(&c[1]).map(|(a, b)| a - b).collect::<Vec<_>>())
        .collect();
    let task = principal_directions(&Tensor::matrix(pairs.len(), d, diffs)?, cfg.taskdiff_rank)?;

    let head = head_projector(model, cfg.head_rank)?;
    let supp_rows: Vec<f64> = means
        .iter()
        .flat_map(|m| {
            let deltas: Vec<Vec<f64>> = (layers.start..layers.end)
                .map(|l| m[l].iter().zip(&m[l - 1]).map(|(a, b)| a - b).collect())
                .collect();
            suppressed_vector(&deltas, &head)
        })
        .collect();
    let supp = principal_directions(&Tensor::matrix(seqs.len(), d, supp_rows)?, cfg.suppressed_rank)?;

    let p_task = projector(&task);
    let p_supp = projector(&supp);
    let p_write = write_projector(model)?;
    let product = p_write.matmul(&p_supp)?.matmul(&p_task)?;
    let s = svd(&product)?;
    let achievable = s.s.iter().filter(|&&v| v > 1e-6).count();
    if achievable < k {
        return Err(Error::Config(format!(
            "loss subspace rank deficient: requested {k}, achievable {achievable}"
        )));
    }
    let idx: Vec<usize> = (0..k).collect();
    let basis = s.u.select_columns(&idx);
    let norm = |p: &Tensor, v: &[f64]| apply(p, v).iter().map(|x| x * x).sum::<f64>().sqrt();
    let provenance = (0..k)
        .map(|j| {
            let b = basis.column(j);
            [norm(&p_task, &b), norm(&p_supp, &b), norm(&p_write, &b)]
        })
        .collect();
    Ok(LossSubspace {
        fisher_w: vec![1.0; k],
        fisher_floor: cfg.fisher_floor,
        provenance,
        basis,
    })
}

/// `w_d = sqrt((μ₊ − μ₋)² / (σ²₊ + σ²₋ + ε))` per column, with unbiased
/// sample variances.
pub fn fisher_weights(pos: &Tensor, neg: &Tensor, eps: f64) -> Result<Vec<f64>> {
    if pos.rank() != 2 || neg.rank() != 2 || pos.cols() != neg.cols() {
        return Err(Error::dim("fisher_weights", pos.shape(), neg.shape()));
    }
    if pos.rows() < 2 || neg.rows() < 2 {
        return Err(Error::Input("fisher weights need at least 2 samples per side".into()));
    }
    let stats = |t: &Tensor, j: usize| {
        let col = t.column(j);
        let n = col.len() as f64;
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / (n - 1.0);
        (mean, var)
    };
    let w: Vec<f64> = (0..pos.cols())
        .map(|j| {
            let (mp, vp) = stats(pos, j);
            let (mn, vn) = stats(neg, j);
            ((mp - mn).powi(2) / (vp + vn + eps)).sqrt()
        })
        .collect();
    if w.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical(format!("non-finite fisher weights {w:?}")));
    }
    Ok(w)
}

/// Fisher weights of tape values, recorded as a constant so no gradient
/// flows back through them.
pub fn fisher_weights_tape(tape: &mut Tape, pos: Var, neg: Var, eps: f64) -> Result<Var> {
    let w = fisher_weights(tape.value(pos), tape.value(neg), eps)?;
    Ok(tape.constant(Tensor::vector(w)))
}
