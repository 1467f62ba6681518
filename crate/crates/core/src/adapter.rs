//! SVD steering adapter: `W'(α) = U·(S + αΔS)·R(α)·Vᵀ + W_res`, where
//! `R(α)` is a Cayley rotation of the selected right singular vectors.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config_section;
use crate::error::{Error, Result};
use crate::microlm::checkpoint::{encode_container, read_container};
use crate::microlm::{HiddenTrace, MicroLm, WriterId};
use crate::tensor::linalg::svd_named;
use crate::tensor::{Svd, SvdFactors, Tape, Tensor, Var};

config_section!(
    AdapterConfig, "adapter" {
        rank: usize = 16,
        theta_max: f64 = std::f64::consts::FRAC_PI_3,
        /// Std of the random initial A and ΔS; 0 starts at the exact identity.
        init_scale: f64 = 0.01,
        seed: u64 = 0,
    }
);

/// `2·tan(θ_max/2)`
pub fn a_limit(theta_max: f64) -> f64 {
    2.0 * (theta_max / 2.0).tan()
}

/// `R(α) = (I − (α/2)A_c)(I + (α/2)A_c)⁻¹` with `A_c = a_lim·tanh(A/a_lim)`.
pub fn cayley(a: &Tensor, alpha: f64, theta_max: f64) -> Result<Tensor> {
    let n = a.rows();
    if a.rank() != 2 || a.cols() != n {
        return Err(Error::dim("cayley", a.shape(), &[n, n]));
    }
    if alpha == 0.0 {
        return Ok(Tensor::eye(n));
    }
    let mut tape = Tape::new();
    let av = tape.constant(a.clone());
    let r = cayley_tape(&mut tape, av, alpha, a_limit(theta_max))?;
    Ok(tape.value(r).clone())
}

/// Soft clamp `a_lim·tanh(A/a_lim)`.
pub fn soft_clamp(tape: &mut Tape, a: Var, a_lim: f64) -> Var {
    let x = tape.scale(a, 1.0 / a_lim);
    let x = tape.tanh(x);
    tape.scale(x, a_lim)
}

fn cayley_tape(tape: &mut Tape, a: Var, alpha: f64, a_lim: f64) -> Result<Var> {
    let n = tape.value(a).rows();
    let ac = soft_clamp(tape, a, a_lim);
    let half = tape.scale(ac, alpha / 2.0);
    let eye = tape.constant(Tensor::eye(n));
    let plus = tape.add(eye, half)?;
    let minus = tape.sub(eye, half)?;
    // the two factors commute, so (I - X)(I + X)⁻¹ = (I + X)⁻¹(I - X)
    tape.solve(plus, minus)
}

/// One adapted residual writer.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterModule {
    pub writer: WriterId,
    pub factors: SvdFactorsData,
    pub selected_dims: Vec<usize>,
    /// Strictly-lower-triangular entries of A, row-major.
    pub a_params: Tensor,
    pub ds: Tensor,
}

/// Plain-data mirror of [`SvdFactors`] (kept separate so the module can be
/// compared and serialised).
#[derive(Clone, Debug, PartialEq)]
pub struct SvdFactorsData {
    pub u: Tensor,
    pub s: Tensor,
    pub v: Tensor,
    pub w_res: Tensor,
}

impl From<SvdFactors> for SvdFactorsData {
    fn from(f: SvdFactors) -> Self {
        SvdFactorsData {
            u: f.u,
            s: Tensor::vector(f.s),
            v: f.v,
            w_res: f.w_res,
        }
    }
}

impl AdapterModule {
    pub fn rank(&self) -> usize {
        self.selected_dims.len()
    }

    /// The skew-symmetric matrix `A` expanded from its free parameters.
    pub fn skew(&self) -> Tensor {
        crate::tensor::tape::skew_from_lower(self.a_params.data(), self.rank())
    }

    pub fn base_weight(&self) -> Tensor {
        let f = &self.factors;
        let us = scale_cols(&f.u, f.s.data());
        us.matmul_t(&f.v).and_then(|w| w.add(&f.w_res)).expect("factor shapes")
    }

    /// Number of entries of `S + αΔS` that are negative and get clamped.
    pub fn clamped_count(&self, alpha: f64) -> usize {
        self.factors
            .s
            .data()
            .iter()
            .zip(self.ds.data())
            .filter(|(s, d)| *s + alpha * *d < 0.0)
            .count()
    }

    /// Builds `W'(α)` on a tape from handles to `A`'s parameters and `ΔS`.
    pub fn effective_weight_tape(&self, tape: &mut Tape, a_params: Var, ds: Var, alpha: f64, theta_max: f64) -> Result<Var> {
        let base = tape.constant(self.base_weight());
        self.steered_weight_tape(tape, base, a_params, ds, alpha, theta_max)
    }

    /// `W'(α)` written as `W + U·(relu(S + αΔS)·R(α) − S)·Vᵀ`, which equals
    /// the factored form whenever `W = U·S·Vᵀ + W_res` and leaves `W`
    /// bit-for-bit unchanged when the middle factor vanishes.
    pub fn steered_weight_tape(
        &self,
        tape: &mut Tape,
        base: Var,
        a_params: Var,
        ds: Var,
        alpha: f64,
        theta_max: f64,
    ) -> Result<Var> {
        let f = &self.factors;
        let r = self.rank();
        let a = tape.skew_from_lower(a_params, r)?;
        let rot = cayley_tape(tape, a, alpha, a_limit(theta_max))?;
        let s = tape.constant(f.s.clone());
        let sds = tape.scale(ds, alpha);
        let sv = tape.add(s, sds)?;
        let sv = tape.relu(sv);
        let b = tape.scale_rows(rot, sv)?;
        let s0 = tape.constant(Tensor::diag(f.s.data()));
        let mid = tape.sub(b, s0)?;
        let u = tape.constant(f.u.clone());
        let v = tape.constant(f.v.clone());
        let um = tape.matmul(u, mid)?;
        let low = tape.linear(um, v)?;
        tape.add(base, low)
    }

    /// `W'(α)` as a plain tensor. At `α = 0` this is the stored base weight.
    pub fn effective_weight_value(&self, alpha: f64, theta_max: f64) -> Result<Tensor> {
        self.steered_weight_value(&self.base_weight(), alpha, theta_max)
    }

    /// [`Self::steered_weight_tape`] on plain tensors; returns `base` itself
    /// at `α = 0`.
    pub fn steered_weight_value(&self, base: &Tensor, alpha: f64, theta_max: f64) -> Result<Tensor> {
        if alpha == 0.0 {
            return Ok(base.clone());
        }
        let mut tape = Tape::new();
        let b = tape.constant(base.clone());
        let a = tape.constant(self.a_params.clone());
        let ds = tape.constant(self.ds.clone());
        let w = self.steered_weight_tape(&mut tape, b, a, ds, alpha, theta_max)?;
        Ok(tape.value(w).clone())
    }
}

fn scale_cols(m: &Tensor, s: &[f64]) -> Tensor {
    let c = m.cols();
    let mut out = m.clone();
    for row in out.data_mut().chunks_mut(c) {
        for (v, k) in row.iter_mut().zip(s) {
            *v *= k;
        }
    }
    out
}

/// Population standard deviation of each column of `x·v`.
fn projected_std(x: &Tensor, v: &Tensor) -> Result<Vec<f64>> {
    let p = x.matmul(v)?;
    let n = p.rows() as f64;
    Ok((0..p.cols())
        .map(|k| {
            let col = p.column(k);
            let mean = col.iter().sum::<f64>() / n;
            (col.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / n).sqrt()
        })
        .collect())
}

fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// WANDA-style selection of `r` singular indices: `score_k = s_k·std(X·v_k)`
/// ranked separately for chosen, rejected and (chosen − rejected) inputs.
/// Each source contributes `r/3` indices (the difference source takes the
/// remainder); collisions advance to the next unused index.
pub fn wanda_select(svd: &Svd, calib_cho: &Tensor, calib_rej: &Tensor, r: usize) -> Result<Vec<usize>> {
    if calib_cho.shape() != calib_rej.shape() {
        return Err(Error::dim("wanda_select", calib_cho.shape(), calib_rej.shape()));
    }
    let diff = calib_cho.sub(calib_rej)?;
    let p = svd.s.len();
    if r > p {
        return Err(Error::Config(format!(
            "adapter rank {r} exceeds the {p} available singular directions"
        )));
    }
    let per = r / 3;
    let quotas = [per, per, r - 2 * per];
    let mut chosen = Vec::with_capacity(r);
    for (x, quota) in [calib_cho, calib_rej, &diff].into_iter().zip(quotas) {
        let std = projected_std(x, &svd.v)?;
        let scores: Vec<f64> = svd.s.iter().zip(&std).map(|(s, sd)| s * sd).collect();
        let mut taken = 0;
        for k in ranking(&scores) {
            if taken == quota {
                break;
            }
            if !chosen.contains(&k) {
                chosen.push(k);
                taken += 1;
            }
        }
        if taken < quota {
            return Err(Error::Config(format!(
                "only {} distinct singular directions available for adapter rank {r}",
                chosen.len()
            )));
        }
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Factors restricted to `dims` plus the residual that restores `w`.
pub fn factors_for_dims(w: &Tensor, svd: &Svd, dims: &[usize]) -> Result<SvdFactors> {
    let u = svd.u.select_columns(dims);
    let v = svd.v.select_columns(dims);
    let s: Vec<f64> = dims.iter().map(|&k| svd.s[k]).collect();
    let low = scale_cols(&u, &s).matmul_t(&v)?;
    let w_res = w.sub(&low)?;
    Ok(SvdFactors { u, s, v, w_res })
}

/// Calibration inputs for one writer: rows of layer inputs from the chosen
/// and rejected prompts, aligned row by row.
pub struct WriterCalibration {
    pub cho: Tensor,
    pub rej: Tensor,
}

/// Inputs of every residual writer (in [`MicroLm::residual_writers`] order)
/// for aligned chosen and rejected prompts, one row per token.
pub fn collect_calibration(model: &MicroLm, cho: &[&[usize]], rej: &[&[usize]]) -> Result<Vec<WriterCalibration>> {
    if cho.len() != rej.len() || cho.iter().zip(rej).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::Input("calibration prompts must come in equal-length pairs".into()));
    }
    let gather = |seqs: &[&[usize]]| -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let p = model.register(&mut tape, false);
        let tr = model.forward_tape(&mut tape, &p, seqs)?;
        Ok(tr
            .writer_inputs
            .iter()
            .flat_map(|&(att, up)| [tape.value(att).clone(), tape.value(up).clone()])
            .collect())
    };
    let c = gather(cho)?;
    let r = gather(rej)?;
    Ok(c.into_iter().zip(r).map(|(cho, rej)| WriterCalibration { cho, rej }).collect())
}

/// Learnable adapter over a model's residual writers.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterState {
    pub cfg: AdapterConfig,
    pub theta_max: f64,
    pub modules: Vec<AdapterModule>,
}

impl AdapterState {
    /// Decomposes every residual writer, selects dimensions from the
    /// calibration inputs and initialises `A`, `ΔS`.
    pub fn build(model: &MicroLm, calib: &[WriterCalibration], cfg: &AdapterConfig) -> Result<Self> {
        let writers = model.residual_writers();
        if calib.len() != writers.len() {
            return Err(Error::Input(format!(
                "expected calibration for {} writers, got {}",
                writers.len(),
                calib.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut modules = Vec::with_capacity(writers.len());
        for (id, cal) in writers.into_iter().zip(calib) {
            let w = model.params.writer(id);
            let svd = svd_named(w, &id.name())?;
            let dims = wanda_select(&svd, &cal.cho, &cal.rej, cfg.rank)?;
            let factors = factors_for_dims(w, &svd, &dims)?;
            let r = dims.len();
            let mut init = |n: usize| {
                if cfg.init_scale == 0.0 {
                    return vec![0.0; n];
                }
                let d = Normal::new(0.0, cfg.init_scale).expect("valid std");
                (0..n).map(|_| d.sample(&mut rng)).collect::<Vec<f64>>()
            };
            let a_params = Tensor::vector(init(r * r.saturating_sub(1) / 2));
            let ds = Tensor::vector(init(r));
            modules.push(AdapterModule {
                writer: id,
                factors: factors.into(),
                selected_dims: dims,
                a_params,
                ds,
            });
        }
        Ok(AdapterState {
            theta_max: cfg.theta_max,
            cfg: cfg.clone(),
            modules,
        })
    }

    /// Resets every `A` and `ΔS` to zero (an exact identity adapter).
    pub fn zero_params(&mut self) {
        for m in &mut self.modules {
            m.a_params.data_mut().iter_mut().for_each(|v| *v = 0.0);
            m.ds.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Flat list of trainable tensors: `A` then `ΔS` for each module.
    pub fn trainable(&self) -> Vec<&Tensor> {
        self.modules.iter().flat_map(|m| [&m.a_params, &m.ds]).collect()
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        self.modules.iter_mut().flat_map(|m| [&mut m.a_params, &mut m.ds]).collect()
    }

    /// Checks that every module matches a writer of `model` and that its
    /// factors reconstruct that writer.
    pub fn check_compatible(&self, model: &MicroLm) -> Result<()> {
        let writers = model.residual_writers();
        if writers.len() != self.modules.len() {
            return Err(Error::Format(format!(
                "adapter has {} modules, model has {} residual writers",
                self.modules.len(),
                writers.len()
            )));
        }
        for (m, id) in self.modules.iter().zip(writers) {
            if m.writer != id {
                return Err(Error::Format(format!("expected module {}, found {}", id.name(), m.writer.name())));
            }
            let w = model.params.writer(id);
            let rebuilt = m.base_weight();
            if rebuilt.shape() != w.shape() {
                return Err(Error::Format(format!(
                    "module {}: expected shape {:?}, found {:?}",
                    id.name(),
                    w.shape(),
                    rebuilt.shape()
                )));
            }
            let rel = rebuilt.sub(w)?.frobenius_norm() / w.frobenius_norm().max(1e-300);
            if rel > 1e-9 {
                return Err(Error::Format(format!(
                    "module {}: factors do not reconstruct the model weight (relative error {rel:.3e})",
                    id.name()
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    /// Checkpoint bytes as written by [`AdapterState::save`].
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        for m in &self.modules {
            let n = m.writer.name();
            tensors.push((format!("{n}.selected"), Tensor::vector(m.selected_dims.iter().map(|&d| d as f64).collect())));
            tensors.push((format!("{n}.A"), m.a_params.clone()));
            tensors.push((format!("{n}.dS"), m.ds.clone()));
            tensors.push((format!("{n}.U"), m.factors.u.clone()));
            tensors.push((format!("{n}.S"), m.factors.s.clone()));
            tensors.push((format!("{n}.V"), m.factors.v.clone()));
            tensors.push((format!("{n}.W_res"), m.factors.w_res.clone()));
        }
        let text = crate::config::render_section(&self.cfg);
        encode_container(&text, &tensors)
    }

    /// Loads an adapter and verifies it against `model`.
    pub fn load(path: &Path, model: &MicroLm) -> Result<Self> {
        let (text, tensors) = read_container(path)?;
        let mut raw = crate::config::RawConfig::parse(&text)?;
        let cfg: AdapterConfig = raw.take()?;
        raw.finish(&crate::config::qualified_keys::<AdapterConfig>())?;
        let mut map: std::collections::BTreeMap<String, Tensor> = tensors.into_iter().collect();
        let mut take = |name: String| map.remove(&name).ok_or_else(|| Error::Format(format!("missing tensor {name}")));
        let mut modules = Vec::new();
        for id in model.residual_writers() {
            let n = id.name();
            let selected = take(format!("{n}.selected"))?;
            let selected_dims: Vec<usize> = selected.data().iter().map(|&d| d as usize).collect();
            let r = selected_dims.len();
            let a_params = take(format!("{n}.A"))?;
            let ds = take(format!("{n}.dS"))?;
            if a_params.len() != r * r.saturating_sub(1) / 2 || ds.len() != r {
                return Err(Error::Format(format!(
                    "module {n}: expected {} rotation and {r} scale parameters, found {} and {}",
                    r * r.saturating_sub(1) / 2,
                    a_params.len(),
                    ds.len()
                )));
            }
            modules.push(AdapterModule {
                writer: id,
                factors: SvdFactorsData {
                    u: take(format!("{n}.U"))?,
                    s: take(format!("{n}.S"))?,
                    v: take(format!("{n}.V"))?,
                    w_res: take(format!("{n}.W_res"))?,
                },
                selected_dims,
                a_params,
                ds,
            });
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {extra} in adapter file")));
        }
        let state = AdapterState {
            theta_max: cfg.theta_max,
            cfg,
            modules,
        };
        state.check_compatible(model)?;
        Ok(state)
    }
}

/// A model with an adapter installed.
pub struct Attached<'a> {
    model: &'a MicroLm,
    adapter: &'a AdapterState,
}

/// Installs `adapter` on `model` after checking they belong together.
pub fn attach<'a>(model: &'a MicroLm, adapter: &'a AdapterState) -> Result<Attached<'a>> {
    adapter.check_compatible(model)?;
    Ok(Attached { model, adapter })
}

impl<'a> Attached<'a> {
    pub fn forward(&self, tokens: &[usize], alpha: f64) -> Result<HiddenTrace> {
        self.model.forward(tokens, Some(self.adapter), alpha)
    }

    pub fn adapter(&self) -> &AdapterState {
        self.adapter
    }

    /// Removes the adapter, returning the untouched base model.
    pub fn detach(self) -> &'a MicroLm {
        self.model
    }
}
