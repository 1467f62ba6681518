//! Adapter optimisation with early stopping, α-sign calibration and run
//! directories.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapter::{collect_calibration, AdapterConfig, AdapterState};
use crate::config::{qualified_keys, render_section, RawConfig};
use crate::config_section;
use crate::error::{Error, Result};
use crate::losses::{
    antipasto_loss_tape, loss_and_grads, reference_pass, sequence_terms, LossBreakdown, LossConfig, LossContext, Reference,
};
use crate::microlm::corpus::World;
use crate::microlm::MicroLm;
use crate::optim::{lr_at, AdamW};
use crate::signals::{build_pairs, build_subspace, pairs_to_jsonl, ContrastPair, LossSubspace, SignalsConfig};
use crate::tensor::{Tape, Tensor};

config_section!(
    TrainConfig, "train" {
        lr: f64 = 1e-3,
        weight_decay: f64 = 1e-5,
        batch_size: usize = 8,
        accum_steps: usize = 4,
        epochs: usize = 30,
        warmup_frac: f64 = 0.3,
        /// Validation evaluations without improvement before stopping.
        patience: usize = 22,
        val_split: f64 = 0.15,
        lr_floor: f64 = 1e-5,
        /// Training pairs used to rank singular dimensions.
        calib_pairs: usize = 64,
        seeds: Vec<u64> = vec![1337, 42, 1338],
    }
);

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.val_split > 0.0 && self.val_split < 1.0) {
            return Err(Error::Config("train.val_split must be in (0, 1)".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("train.patience must be at least 1".into()));
        }
        if self.batch_size == 0 || self.accum_steps == 0 || self.calib_pairs == 0 {
            return Err(Error::Config("train.batch_size, train.accum_steps and train.calib_pairs must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr_floor >= 0.0 && self.lr_floor <= self.lr) {
            return Err(Error::Config("train.lr must be positive and train.lr_floor in [0, lr]".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Config("train.warmup_frac must be in [0, 1]".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("train.seeds must list at least one seed".into()));
        }
        Ok(())
    }
}

config_section!(
    /// Which sign of α moves the model toward the honest pole.
    Calibration, "calibration" {
        sign: i64 = 1,
        /// Mean of `Δ₊` over the validation pairs.
        mean_gap: f64 = 0.0,
        n_pairs: usize = 0,
        indeterminate: bool = true,
    }
);

/// Below this `|mean Δ₊|` the sign is not trusted.
pub const CALIBRATION_TOL: f64 = 1e-6;

impl Calibration {
    /// Sign from per-pair gap shifts `Δ₊`.
    pub fn from_gaps(deltas: &[f64]) -> Self {
        let mean_gap = if deltas.is_empty() {
            0.0
        } else {
            deltas.iter().sum::<f64>() / deltas.len() as f64
        };
        let indeterminate = !mean_gap.is_finite() || mean_gap.abs() < CALIBRATION_TOL;
        let sign = if !indeterminate && mean_gap < 0.0 { -1 } else { 1 };
        Calibration {
            sign,
            mean_gap,
            n_pairs: deltas.len(),
            indeterminate,
        }
    }

    /// Coefficient to apply for a behavioural `alpha`.
    pub fn apply(&self, alpha: f64) -> f64 {
        self.sign as f64 * alpha
    }

    pub fn render(&self) -> String {
        render_section(self)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut raw = RawConfig::parse(text)?;
        let c: Calibration = raw.take()?;
        raw.finish(&qualified_keys::<Calibration>())?;
        if c.sign != 1 && c.sign != -1 {
            return Err(Error::Format(format!("calibration sign {} is not ±1", c.sign)));
        }
        Ok(c)
    }
}

/// Per-pair preference gaps `g(α) = NLL(x_rej) − NLL(x_cho)` (mean per token).
pub fn preference_gaps(model: &MicroLm, adapter: Option<&AdapterState>, pairs: &[ContrastPair], alpha: f64) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(32) {
        let mut tape = Tape::new();
        let p = model.register_steered(&mut tape, adapter, alpha)?;
        let seqs: Vec<&[usize]> = chunk.iter().flat_map(|c| [c.x_cho.as_slice(), c.x_rej.as_slice()]).collect();
        let tr = model.forward_tape(&mut tape, &p, &seqs)?;
        let terms = sequence_terms(&mut tape, tr.logits, &tr.spans, &seqs)?;
        for pair in terms.chunks(2) {
            out.push(tape.item(pair[1].1) - tape.item(pair[0].1));
        }
    }
    Ok(out)
}

/// Mean `Δ₊ = g(+1) − g(0)` on validation pairs decides the sign.
pub fn calibrate(model: &MicroLm, adapter: &AdapterState, val_pairs: &[ContrastPair]) -> Result<Calibration> {
    if val_pairs.is_empty() {
        return Err(Error::Input("calibration needs validation pairs".into()));
    }
    let g0 = preference_gaps(model, None, val_pairs, 0.0)?;
    let g1 = preference_gaps(model, Some(adapter), val_pairs, 1.0)?;
    let deltas: Vec<f64> = g1.iter().zip(&g0).map(|(a, b)| a - b).collect();
    Ok(Calibration::from_gaps(&deltas))
}

/// Deterministic train/validation split.
pub fn split_pairs(pairs: &[ContrastPair], val_split: f64, seed: u64) -> Result<(Vec<ContrastPair>, Vec<ContrastPair>)> {
    let n = pairs.len();
    let n_val = ((n as f64) * val_split).round() as usize;
    if n_val == 0 || n_val >= n {
        return Err(Error::Config(format!("val_split {val_split} leaves an empty split of {n} pairs")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    idx.shuffle(&mut rng);
    let val = idx[..n_val].iter().map(|&i| pairs[i].clone()).collect();
    let train = idx[n_val..].iter().map(|&i| pairs[i].clone()).collect();
    Ok((train, val))
}

/// One optimizer step's averaged loss terms.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub l_proj: f64,
    pub b_coh: f64,
    pub b_mono: f64,
    pub total: f64,
    pub cos_pos: f64,
    pub cos_neg: f64,
}

/// Validation loss after `step` optimizer steps.
#[derive(Clone, Debug, PartialEq)]
pub struct ValRow {
    pub step: usize,
    pub l_proj: f64,
    pub b_coh: f64,
    pub b_mono: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub rows: Vec<LogRow>,
    pub val: Vec<ValRow>,
    pub best_step: usize,
    pub best_val: f64,
    pub stopped_early: bool,
    pub warnings: Vec<String>,
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,l_proj,b_coh,b_mono,total,cos_pos,cos_neg\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:?},{:?},{:?},{:?},{:?},{:?}",
                r.step, r.l_proj, r.b_coh, r.b_mono, r.total, r.cos_pos, r.cos_neg
            );
        }
        s
    }

    pub fn val_csv(&self) -> String {
        let mut s = String::from("step,l_proj,b_coh,b_mono,total\n");
        for r in &self.val {
            let _ = writeln!(s, "{},{:?},{:?},{:?},{:?}", r.step, r.l_proj, r.b_coh, r.b_mono, r.total);
        }
        s
    }

    /// Medians of validation `l_proj` over the first and last 10% of
    /// evaluations (at least one each).
    pub fn l_proj_progress(&self) -> Option<(f64, f64)> {
        if self.val.len() < 2 {
            return None;
        }
        let k = self.val.len().div_ceil(10);
        let mut first: Vec<f64> = self.val[..k].iter().map(|r| r.l_proj).collect();
        let mut last: Vec<f64> = self.val[self.val.len() - k..].iter().map(|r| r.l_proj).collect();
        Some((median(&mut first), median(&mut last)))
    }
}

/// Frozen inputs of a training run.
#[derive(Clone, Copy, Debug)]
pub struct Trainer<'a> {
    pub model: &'a MicroLm,
    pub signals: &'a SignalsConfig,
    pub loss: &'a LossConfig,
    pub cfg: &'a TrainConfig,
}

fn accumulate(acc: &mut ValRow, bd: &LossBreakdown, w: f64) {
    acc.l_proj += w * bd.l_proj;
    acc.b_coh += w * bd.b_coh;
    acc.b_mono += w * bd.b_mono;
    acc.total += w * bd.total;
}

impl Trainer<'_> {
    /// Mean validation loss with the monotonicity barrier always active, so
    /// evaluations before and after its warmup are comparable.
    pub fn validation_loss(&self, adapter: &AdapterState, subspace: &LossSubspace, pairs: &[ContrastPair], refs: &[Reference], step: usize) -> Result<ValRow> {
        let ctx = LossContext {
            model: self.model,
            adapter,
            subspace,
            signals: self.signals,
            cfg: self.loss,
        };
        let mut row = ValRow {
            step,
            l_proj: 0.0,
            b_coh: 0.0,
            b_mono: 0.0,
            total: 0.0,
        };
        let n = pairs.len() as f64;
        let bs = self.cfg.batch_size;
        for (chunk, rs) in pairs.chunks(bs).zip(refs.chunks(bs)) {
            let mut tape = Tape::new();
            let handles: Vec<_> = adapter
                .modules
                .iter()
                .map(|m| (tape.constant(m.a_params.clone()), tape.constant(m.ds.clone())))
                .collect();
            let batch: Vec<&ContrastPair> = chunk.iter().collect();
            let (_, bd) = antipasto_loss_tape(&mut tape, &ctx, &handles, &batch, rs, 1.0)?;
            accumulate(&mut row, &bd, chunk.len() as f64 / n);
        }
        Ok(row)
    }

    /// Trains `adapter` in place and leaves it at the best validation
    /// checkpoint. A non-finite loss restores that checkpoint and fails with
    /// a training error.
    pub fn train(
        &self,
        adapter: &mut AdapterState,
        subspace: &mut LossSubspace,
        train: &[ContrastPair],
        val: &[ContrastPair],
        seed: u64,
    ) -> Result<TrainHistory> {
        let cfg = self.cfg;
        cfg.validate()?;
        self.loss.validate()?;
        self.signals.validate(self.model)?;
        if train.is_empty() || val.is_empty() {
            return Err(Error::Input("training needs non-empty train and validation pairs".into()));
        }
        let train_refs = reference_pass(self.model, &train.iter().collect::<Vec<_>>(), self.signals)?;
        let val_refs = reference_pass(self.model, &val.iter().collect::<Vec<_>>(), self.signals)?;

        let sizes: Vec<usize> = adapter.trainable().iter().map(|t| t.len()).collect();
        let mut opt = AdamW::new(&sizes, cfg.weight_decay);
        let per_step = cfg.batch_size * cfg.accum_steps;
        let total_steps = cfg.epochs * train.len().div_ceil(per_step);

        let mut history = TrainHistory::default();
        let first = self.validation_loss(adapter, subspace, val, &val_refs, 0)?;
        history.best_val = first.total;
        history.val.push(first);
        let mut best = adapter.clone();
        let mut since_best = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let mut step = 0;

        'epochs: for _ in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut rng);
            for chunk in order.chunks(per_step) {
                let frac = step as f64 / total_steps as f64;
                let mut grads: Vec<Tensor> = sizes.iter().map(|&n| Tensor::vector(vec![0.0; n])).collect();
                let mut row = LogRow {
                    step,
                    l_proj: 0.0,
                    b_coh: 0.0,
                    b_mono: 0.0,
                    total: 0.0,
                    cos_pos: 0.0,
                    cos_neg: 0.0,
                };
                let mut fisher = Vec::new();
                for mb in chunk.chunks(cfg.batch_size) {
                    let pairs: Vec<&ContrastPair> = mb.iter().map(|&i| &train[i]).collect();
                    let refs: Vec<Reference> = mb.iter().map(|&i| train_refs[i].clone()).collect();
                    let ctx = LossContext {
                        model: self.model,
                        adapter,
                        subspace,
                        signals: self.signals,
                        cfg: self.loss,
                    };
                    let (bd, g) = match loss_and_grads(&ctx, &pairs, &refs, frac) {
                        Ok(x) => x,
                        Err(Error::Numerical(msg)) => return Err(abort(adapter, &best, &history, step, &msg)),
                        Err(e) => return Err(e),
                    };
                    let w = mb.len() as f64 / chunk.len() as f64;
                    for (acc, gi) in grads.iter_mut().zip(&g) {
                        for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                            *a += w * b;
                        }
                    }
                    row.l_proj += w * bd.l_proj;
                    row.b_coh += w * bd.b_coh;
                    row.b_mono += w * bd.b_mono;
                    row.total += w * bd.total;
                    row.cos_pos += w * bd.cos_pos;
                    row.cos_neg += w * bd.cos_neg;
                    fisher = bd.fisher_w;
                }
                if grads.iter().any(|g| !g.is_finite()) {
                    return Err(abort(adapter, &best, &history, step, "non-finite gradient"));
                }
                subspace.set_fisher(&fisher);
                let lr = lr_at(step, total_steps, cfg.warmup_frac, cfg.lr, cfg.lr_floor);
                let grad_refs: Vec<&Tensor> = grads.iter().collect();
                opt.step(&mut adapter.trainable_mut(), &grad_refs, lr);
                for m in &adapter.modules {
                    let clamped = m.clamped_count(1.0) + m.clamped_count(-1.0);
                    if clamped > 0 {
                        history
                            .warnings
                            .push(format!("step {step}: {} has {clamped} clamped singular values", m.writer.name()));
                    }
                }
                history.rows.push(row);
                step += 1;
            }
            let v = self.validation_loss(adapter, subspace, val, &val_refs, step)?;
            let improved = v.total < history.best_val;
            history.val.push(v);
            if improved {
                history.best_val = history.val.last().expect("just pushed").total;
                history.best_step = step;
                best = adapter.clone();
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    history.stopped_early = true;
                    break 'epochs;
                }
            }
        }
        *adapter = best;
        Ok(history)
    }
}

fn abort(adapter: &mut AdapterState, best: &AdapterState, history: &TrainHistory, step: usize, msg: &str) -> Error {
    *adapter = best.clone();
    Error::Training {
        message: format!("step {step}: {msg}; adapter restored to the step-{} checkpoint", history.best_step),
        curve: history.rows.iter().map(|r| r.total).collect(),
    }
}

/// All settings of a steering run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SteerConfig {
    pub adapter: AdapterConfig,
    pub signals: SignalsConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl SteerConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut raw = RawConfig::parse(text)?;
        let cfg = SteerConfig {
            adapter: raw.take()?,
            signals: raw.take()?,
            loss: raw.take()?,
            train: raw.take()?,
        };
        let mut known = qualified_keys::<AdapterConfig>();
        known.extend(qualified_keys::<SignalsConfig>());
        known.extend(qualified_keys::<LossConfig>());
        known.extend(qualified_keys::<TrainConfig>());
        raw.finish(&known)?;
        cfg.loss.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn render(&self) -> String {
        [
            render_section(&self.adapter),
            render_section(&self.signals),
            render_section(&self.loss),
            render_section(&self.train),
        ]
        .join("\n")
    }
}

/// Outcome of one seed.
#[derive(Clone, Debug)]
pub struct SteerRun {
    pub seed: u64,
    pub adapter: AdapterState,
    pub subspace: LossSubspace,
    pub history: TrainHistory,
    pub calibration: Calibration,
    pub train_pairs: Vec<ContrastPair>,
    pub val_pairs: Vec<ContrastPair>,
}

pub const CONFIG_FILE: &str = "config.txt";
pub const LOG_FILE: &str = "train_log.csv";
pub const VAL_LOG_FILE: &str = "val_log.csv";
pub const ADAPTER_FILE: &str = "adapter.apst";
pub const LAST_GOOD_FILE: &str = "adapter.last_good.apst";
pub const CALIBRATION_FILE: &str = "calibration.txt";
pub const PAIRS_FILE: &str = "pairs.jsonl";

/// Pairs, dimension selection, subspace, training and calibration for one
/// seed. With `out`, writes the run directory (or, on a training failure,
/// the last good adapter and the log so far).
pub fn run_seed(model: &MicroLm, world: &World, cfg: &SteerConfig, seed: u64, out: Option<&Path>) -> Result<SteerRun> {
    cfg.train.validate()?;
    let mut cfg = cfg.clone();
    cfg.adapter.seed = seed;
    let pairs = build_pairs(world, cfg.signals.n_pairs, seed)?;
    let (train, val) = split_pairs(&pairs, cfg.train.val_split, seed)?;
    let n_cal = cfg.train.calib_pairs.min(train.len());
    let cho: Vec<&[usize]> = train[..n_cal].iter().map(|p| p.x_cho.as_slice()).collect();
    let rej: Vec<&[usize]> = train[..n_cal].iter().map(|p| p.x_rej.as_slice()).collect();
    let calib = collect_calibration(model, &cho, &rej)?;
    let mut adapter = AdapterState::build(model, &calib, &cfg.adapter)?;
    let mut subspace = build_subspace(model, &train, &cfg.signals)?;

    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(CONFIG_FILE), cfg.render())?;
        std::fs::write(dir.join(PAIRS_FILE), pairs_to_jsonl(world, &pairs)?)?;
    }
    let trainer = Trainer {
        model,
        signals: &cfg.signals,
        loss: &cfg.loss,
        cfg: &cfg.train,
    };
    let history = match trainer.train(&mut adapter, &mut subspace, &train, &val, seed) {
        Ok(h) => h,
        Err(e) => {
            if let (Some(dir), Error::Training { .. }) = (out, &e) {
                adapter.save(&dir.join(LAST_GOOD_FILE))?;
            }
            return Err(e);
        }
    };
    let calibration = calibrate(model, &adapter, &val)?;
    if let Some(dir) = out {
        std::fs::write(dir.join(LOG_FILE), history.to_csv())?;
        std::fs::write(dir.join(VAL_LOG_FILE), history.val_csv())?;
        adapter.save(&dir.join(ADAPTER_FILE))?;
        std::fs::write(dir.join(CALIBRATION_FILE), calibration.render())?;
    }
    Ok(SteerRun {
        seed,
        adapter,
        subspace,
        history,
        calibration,
        train_pairs: train,
        val_pairs: val,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calibration_examples() {
        let c = Calibration::from_gaps(&[0.5; 6]);
        assert_eq!((c.sign, c.indeterminate), (1, false));
        let c = Calibration::from_gaps(&[-0.5; 6]);
        assert_eq!((c.sign, c.indeterminate), (-1, false));
        assert_eq!(c.apply(1.0), -1.0);
        let c = Calibration::from_gaps(&[0.0; 6]);
        assert_eq!((c.sign, c.indeterminate), (1, true));
        let c = Calibration::from_gaps(&[1e-7, -1e-8]);
        assert!(c.indeterminate);
    }

    #[test]
    fn calibration_record_round_trips() {
        let c = Calibration::from_gaps(&[-0.25, -0.5, 0.1]);
        assert_eq!(Calibration::parse(&c.render()).unwrap(), c);
        assert!(Calibration::parse("[calibration]\nsign = 0\n").is_err());
    }

    #[test]
    fn train_config_invariants() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { val_split: 0.0, ..Default::default() },
            TrainConfig { val_split: 1.0, ..Default::default() },
            TrainConfig { patience: 0, ..Default::default() },
            TrainConfig { seeds: vec![], ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn steer_config_round_trips_and_rejects_typos() {
        let cfg = SteerConfig::default();
        assert_eq!(SteerConfig::parse(&cfg.render()).unwrap(), cfg);
        let err = SteerConfig::parse("[train]\nlearning_rate = 1\n").unwrap_err().to_string();
        assert!(err.contains("nearest known key"), "{err}");
    }

    #[test]
    fn median_and_progress() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        let mut h = TrainHistory::default();
        for (i, v) in [5.0, 4.0, 3.0].iter().enumerate() {
            h.val.push(ValRow {
                step: i,
                l_proj: *v,
                b_coh: 0.0,
                b_mono: 0.0,
                total: *v,
            });
        }
        assert_eq!(h.l_proj_progress(), Some((5.0, 3.0)));
    }
}
