//! Next-token pretraining on the synthetic corpus and the checks that the
//! resulting model actually follows its persona.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::corpus::{Doc, Persona, Topic, World, COLORS, HELDOUT_PHRASINGS, N_FILLERS};
use super::{CorpusConfig, MicroLm, ModelConfig};
use crate::config::{qualified_keys, render_section, RawConfig};
use crate::config_section;
use crate::error::{Error, Result};
use crate::optim::{lr_at, AdamW};
use crate::tensor::Tape;

config_section!(
    PretrainConfig, "pretrain" {
        /// Upper bound; training stops after the first epoch that meets the
        /// stop targets.
        epochs: usize = 20,
        batch_size: usize = 16,
        lr: f64 = 3e-3,
        weight_decay: f64 = 0.01,
        warmup_frac: f64 = 0.05,
        seed: u64 = 0,
        eval_docs: usize = 600,
        min_persona_acc: f64 = 0.9,
        min_format_acc: f64 = 0.95,
        stop_persona_acc: f64 = 0.97,
        stop_control_tv: f64 = 0.05,
    }
);

/// Post-training measurements.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PretrainMetrics {
    /// Next-token accuracy on template tokens of fresh documents.
    pub format_acc: f64,
    /// Persona-consistent answers on fresh persona documents.
    pub persona_acc: f64,
    /// Persona-consistent answers on held-out facts and unseen phrasings.
    pub transfer_persona_acc: f64,
    /// Truthful answers without a persona on held-out facts and phrasings.
    pub neutral_truth_acc: f64,
    /// Largest persona-induced shift of P(yes) on control questions.
    pub control_tv: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub curve: Vec<f64>,
    pub epochs_run: usize,
    pub metrics: PretrainMetrics,
}

/// Model, corpus and optimisation settings of a pretraining run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainSetup {
    pub model: ModelConfig,
    pub corpus: CorpusConfig,
    pub pretrain: PretrainConfig,
}

impl PretrainSetup {
    pub fn parse(text: &str) -> Result<Self> {
        let mut raw = RawConfig::parse(text)?;
        let s = PretrainSetup {
            model: raw.take()?,
            corpus: raw.take()?,
            pretrain: raw.take()?,
        };
        let mut known = qualified_keys::<ModelConfig>();
        known.extend(qualified_keys::<CorpusConfig>());
        known.extend(qualified_keys::<PretrainConfig>());
        raw.finish(&known)?;
        Ok(s)
    }

    pub fn render(&self) -> String {
        [render_section(&self.model), render_section(&self.corpus), render_section(&self.pretrain)].join("\n")
    }

    /// Builds the world and corpus, then pretrains a fresh model. The
    /// vocabulary size is taken from the world.
    pub fn run(&self) -> Result<(MicroLm, World, PretrainOutcome)> {
        let world = World::new(&self.corpus)?;
        let docs = world.make_corpus(self.pretrain.seed, self.corpus.n_docs)?;
        let mut model = MicroLm::new(ModelConfig {
            vocab_size: world.tokenizer.vocab_size(),
            ..self.model.clone()
        })?;
        let outcome = pretrain(&mut model, &world, &docs, &self.pretrain)?;
        Ok((model, world, outcome))
    }
}

fn next_token_targets(doc: &[usize]) -> Vec<Option<usize>> {
    let mut t: Vec<Option<usize>> = doc[1..].iter().map(|&x| Some(x)).collect();
    t.push(None);
    t
}

/// Trains `model` in place on `docs`. Fails with the loss curve attached if
/// the persona or format accuracy targets are missed.
pub fn pretrain(model: &mut MicroLm, world: &World, docs: &[Doc], cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    if docs.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Config("pretraining needs documents and a positive batch size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sizes: Vec<usize> = model.params.named().iter().map(|(_, t)| t.len()).collect();
    let mut opt = AdamW::new(&sizes, cfg.weight_decay);
    let steps_per_epoch = docs.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut curve = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..docs.len()).collect();
    let mut step = 0;
    let mut metrics = None;
    let mut epochs_run = 0;
    for _ in 0..cfg.epochs {
        epochs_run += 1;
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let pv = model.register(&mut tape, true);
            let seqs: Vec<&[usize]> = batch.iter().map(|&i| docs[i].tokens.as_slice()).collect();
            let targets: Vec<Option<usize>> = seqs.iter().flat_map(|s| next_token_targets(s)).collect();
            let tr = model.forward_tape(&mut tape, &pv, &seqs)?;
            let loss = tape.cross_entropy(tr.logits, &targets)?;
            let lv = tape.item(loss);
            if !lv.is_finite() {
                return Err(Error::Training {
                    message: format!("non-finite pretraining loss at step {step}"),
                    curve,
                });
            }
            curve.push(lv);
            let mut grads = tape.backward(loss)?;
            let gs: Vec<_> = pv.named().into_iter().map(|(_, v)| grads.take(*v).expect("param grad")).collect();
            let lr = lr_at(step, total, cfg.warmup_frac, cfg.lr, cfg.lr * 0.01);
            let mut ps: Vec<&mut crate::tensor::Tensor> = params_mut(model);
            let grefs: Vec<_> = gs.iter().collect();
            opt.step(&mut ps, &grefs, lr);
            step += 1;
        }
        let m = evaluate(model, world, cfg.seed.wrapping_add(0x5eed), cfg.eval_docs)?;
        let done = m.persona_acc >= cfg.stop_persona_acc && m.format_acc > cfg.min_format_acc && m.control_tv <= cfg.stop_control_tv;
        metrics = Some(m);
        if done {
            break;
        }
    }
    let metrics = match metrics {
        Some(m) => m,
        None => evaluate(model, world, cfg.seed.wrapping_add(0x5eed), cfg.eval_docs)?,
    };
    if metrics.persona_acc <= cfg.min_persona_acc || metrics.format_acc <= cfg.min_format_acc {
        return Err(Error::Training {
            message: format!(
                "pretraining missed its targets: persona accuracy {:.3} (need > {}), format accuracy {:.3} (need > {})",
                metrics.persona_acc, cfg.min_persona_acc, metrics.format_acc, cfg.min_format_acc
            ),
            curve,
        });
    }
    Ok(PretrainOutcome { curve, epochs_run, metrics })
}

fn params_mut(model: &mut MicroLm) -> Vec<&mut crate::tensor::Tensor> {
    let p = &mut model.params;
    let mut out: Vec<&mut crate::tensor::Tensor> = vec![&mut p.tok_emb, &mut p.pos_emb];
    for l in &mut p.layers {
        out.extend([&mut l.ln1, &mut l.w_qkv, &mut l.w_o, &mut l.ln2, &mut l.w_up, &mut l.w_down]);
    }
    out.push(&mut p.final_gain);
    out.push(&mut p.head);
    out
}

/// P(yes) normalised over {yes, no} at the answer slot of each prompt.
pub fn p_yes(model: &MicroLm, world: &World, prompts: &[Vec<usize>]) -> Result<Vec<f64>> {
    let (y, n) = (world.yes_id(), world.no_id());
    Ok(model
        .next_token_logprobs(prompts, None, 0.0)?
        .into_iter()
        .map(|lp| {
            let (a, b) = (lp[y].exp(), lp[n].exp());
            a / (a + b)
        })
        .collect())
}

fn format_tokens(world: &World) -> Vec<usize> {
    [".", "q", ":", "?", "my", "choice", "are"]
        .iter()
        .map(|w| world.tokenizer.id(w).expect("template word"))
        .collect()
}

/// Measures format, persona, transfer and control behaviour on fresh samples.
pub fn evaluate(model: &MicroLm, world: &World, seed: u64, n_docs: usize) -> Result<PretrainMetrics> {
    let docs = world.make_corpus(seed, n_docs.max(1))?;
    let fmt = format_tokens(world);
    let (mut hit, mut tot) = (0usize, 0usize);
    for chunk in docs.chunks(64) {
        let mut tape = Tape::new();
        let pv = model.register(&mut tape, false);
        let seqs: Vec<&[usize]> = chunk.iter().map(|d| d.tokens.as_slice()).collect();
        let tr = model.forward_tape(&mut tape, &pv, &seqs)?;
        let logits = tape.value(tr.logits);
        for (&(start, len), s) in tr.spans.iter().zip(&seqs) {
            for i in 0..len - 1 {
                if fmt.contains(&s[i + 1]) {
                    let row = logits.row(start + i);
                    let arg = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).expect("vocab");
                    hit += usize::from(arg == s[i + 1]);
                    tot += 1;
                }
            }
        }
    }
    let format_acc = hit as f64 / tot.max(1) as f64;

    let persona_docs: Vec<&Doc> = docs.iter().filter(|d| d.persona.is_some() && matches!(d.topic, Topic::Fact { .. })).collect();
    let prompts: Vec<Vec<usize>> = persona_docs.iter().map(|d| d.tokens[..d.tokens.len() - 1].to_vec()).collect();
    let py = p_yes(model, world, &prompts)?;
    let persona_acc = persona_docs
        .iter()
        .zip(&py)
        .filter(|(d, p)| (**p > 0.5) == d.answer_yes)
        .count() as f64
        / persona_docs.len().max(1) as f64;

    let mut transfer = Vec::new();
    let mut transfer_ans = Vec::new();
    let mut neutral = Vec::new();
    let mut neutral_ans = Vec::new();
    for (i, fact) in world.heldout_facts().enumerate() {
        for &phrasing in &HELDOUT_PHRASINGS {
            let topic = Topic::Fact { fact, phrasing };
            let filler = (i * 7 + phrasing) % N_FILLERS;
            for persona in [Persona::Honest, Persona::Dishonest] {
                transfer.push(world.tokenizer.encode(&world.answer_prompt(Some(persona), filler, &topic))?);
                transfer_ans.push(world.persona_answer(persona, &topic).expect("fact"));
            }
            neutral.push(world.tokenizer.encode(&world.answer_prompt(None, filler, &topic))?);
            neutral_ans.push(world.facts[fact].truth);
        }
    }
    let acc = |p: &[f64], a: &[bool]| p.iter().zip(a).filter(|(p, a)| (**p > 0.5) == **a).count() as f64 / a.len().max(1) as f64;
    let transfer_persona_acc = acc(&p_yes(model, world, &transfer)?, &transfer_ans);
    let neutral_truth_acc = acc(&p_yes(model, world, &neutral)?, &neutral_ans);

    let mut control_tv: f64 = 0.0;
    for color in 0..COLORS.len() {
        let mut means = [0.0; 2];
        for (k, persona) in [Persona::Honest, Persona::Dishonest].into_iter().enumerate() {
            let prompts: Vec<Vec<usize>> = (0..10)
                .map(|f| world.tokenizer.encode(&world.answer_prompt(Some(persona), f * 5, &Topic::Control { color })))
                .collect::<Result<_>>()?;
            let p = p_yes(model, world, &prompts)?;
            means[k] = p.iter().sum::<f64>() / p.len() as f64;
        }
        control_tv = control_tv.max((means[0] - means[1]).abs());
    }
    Ok(PretrainMetrics {
        format_acc,
        persona_acc,
        transfer_persona_acc,
        neutral_truth_acc,
        control_tv,
    })
}
