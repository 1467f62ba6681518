//! A small pre-norm decoder-only transformer and the synthetic world it is
//! trained on.

pub mod checkpoint;
pub mod corpus;
pub mod pretrain;
pub mod tokenizer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::adapter::AdapterState;
use crate::config_section;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub use corpus::{CorpusConfig, Persona, Topic, World};
pub use tokenizer::Tokenizer;

const NORM_EPS: f64 = 1e-6;

config_section!(
    /// Architecture hyperparameters. `vocab_size = 0` means "take it from the
    /// tokenizer".
    ModelConfig, "model" {
        n_layers: usize = 4,
        d_model: usize = 64,
        n_heads: usize = 4,
        d_ff: usize = 256,
        vocab_size: usize = 0,
        max_seq: usize = 64,
        seed: u64 = 0,
    }
);

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [self.n_layers, self.d_model, self.n_heads, self.d_ff, self.vocab_size, self.max_seq];
        if counts.contains(&0) {
            return Err(Error::Config("model sizes must all be at least 1".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model.d_model = {} is not divisible by model.n_heads = {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff == self.d_model {
            return Err(Error::Config(
                "model.d_ff must differ from model.d_model so the up-projection is not a residual writer".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub ln1: T,
    pub w_qkv: T,
    pub w_o: T,
    pub ln2: T,
    pub w_up: T,
    pub w_down: T,
}

/// Parameter set, generic so the same layout holds tensors or tape handles.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub tok_emb: T,
    pub pos_emb: T,
    pub layers: Vec<LayerParams<T>>,
    pub final_gain: T,
    pub head: T,
}

impl<T> Params<T> {
    /// Every parameter with its canonical name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb), ("pos_emb".to_string(), &self.pos_emb)];
        for (l, p) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.ln1"), &p.ln1));
            out.push((format!("layers.{l}.w_qkv"), &p.w_qkv));
            out.push((format!("layers.{l}.w_o"), &p.w_o));
            out.push((format!("layers.{l}.ln2"), &p.ln2));
            out.push((format!("layers.{l}.w_up"), &p.w_up));
            out.push((format!("layers.{l}.w_down"), &p.w_down));
        }
        out.push(("final_gain".to_string(), &self.final_gain));
        out.push(("head".to_string(), &self.head));
        out
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> Params<U> {
        Params {
            tok_emb: f("tok_emb", &self.tok_emb),
            pos_emb: f("pos_emb", &self.pos_emb),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(l, p)| LayerParams {
                    ln1: f(&format!("layers.{l}.ln1"), &p.ln1),
                    w_qkv: f(&format!("layers.{l}.w_qkv"), &p.w_qkv),
                    w_o: f(&format!("layers.{l}.w_o"), &p.w_o),
                    ln2: f(&format!("layers.{l}.ln2"), &p.ln2),
                    w_up: f(&format!("layers.{l}.w_up"), &p.w_up),
                    w_down: f(&format!("layers.{l}.w_down"), &p.w_down),
                })
                .collect(),
            final_gain: f("final_gain", &self.final_gain),
            head: f("head", &self.head),
        }
    }

    pub fn writer(&self, id: WriterId) -> &T {
        match id.kind {
            WriterKind::AttnOut => &self.layers[id.layer].w_o,
            WriterKind::MlpDown => &self.layers[id.layer].w_down,
        }
    }

    pub fn writer_mut(&mut self, id: WriterId) -> &mut T {
        match id.kind {
            WriterKind::AttnOut => &mut self.layers[id.layer].w_o,
            WriterKind::MlpDown => &mut self.layers[id.layer].w_down,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum WriterKind {
    AttnOut,
    MlpDown,
}

/// Handle to a weight matrix whose output is added to the residual stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WriterId {
    pub layer: usize,
    pub kind: WriterKind,
}

impl WriterId {
    pub fn name(&self) -> String {
        match self.kind {
            WriterKind::AttnOut => format!("layers.{}.w_o", self.layer),
            WriterKind::MlpDown => format!("layers.{}.w_down", self.layer),
        }
    }
}

/// Tape handles for one batched forward pass.
#[derive(Clone, Debug)]
pub struct TraceVars {
    /// `n_layers + 1` residual snapshots, each (total rows × d_model).
    pub residuals: Vec<Var>,
    pub attn_out: Vec<Var>,
    pub mlp_out: Vec<Var>,
    /// Inputs to the attention output projection and MLP down-projection.
    pub writer_inputs: Vec<(Var, Var)>,
    pub logits: Var,
    /// `(first_row, length)` of each sequence in the packed rows.
    pub spans: Vec<(usize, usize)>,
}

/// Residual snapshots and logits of a single sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenTrace {
    pub residuals: Vec<Tensor>,
    pub logits: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MicroLm {
    pub cfg: ModelConfig,
    pub params: Params<Tensor>,
}

impl MicroLm {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let std = 0.02;
        let writer_std = std / (2.0 * cfg.n_layers as f64).sqrt();
        let mut normal = |shape: &[usize], s: f64| {
            let dist = Normal::new(0.0, s).expect("valid std");
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(&mut rng)).collect()).expect("shape")
        };
        let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let tok_emb = normal(&[v, d], std);
        let pos_emb = normal(&[cfg.max_seq, d], std);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                ln1: Tensor::full(&[d], 1.0),
                w_qkv: normal(&[3 * d, d], std),
                w_o: normal(&[d, d], writer_std),
                ln2: Tensor::full(&[d], 1.0),
                w_up: normal(&[f, d], std),
                w_down: normal(&[d, f], writer_std),
            })
            .collect();
        let head = normal(&[v, d], std);
        Ok(MicroLm {
            params: Params {
                tok_emb,
                pos_emb,
                layers,
                final_gain: Tensor::full(&[d], 1.0),
                head,
            },
            cfg,
        })
    }

    /// Matrices whose output dimension equals `d_model`, i.e. the ones that
    /// write into the residual stream.
    pub fn residual_writers(&self) -> Vec<WriterId> {
        let mut out = Vec::new();
        for (layer, p) in self.params.layers.iter().enumerate() {
            let linears = [
                (None, &p.w_qkv),
                (Some(WriterKind::AttnOut), &p.w_o),
                (None, &p.w_up),
                (Some(WriterKind::MlpDown), &p.w_down),
            ];
            for (kind, w) in linears {
                if w.rows() == self.cfg.d_model {
                    let kind = kind.expect("validated: only o/down projections have d_model outputs");
                    out.push(WriterId { layer, kind });
                }
            }
        }
        out
    }

    /// Registers the parameters on a tape.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Params<Var> {
        self.params.map(|_, t| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() || tokens.len() > self.cfg.max_seq {
            return Err(Error::Input(format!(
                "sequence length {} is outside 1..={}",
                tokens.len(),
                self.cfg.max_seq
            )));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::Input(format!("unknown token id {bad}")));
        }
        Ok(())
    }

    /// Batched forward pass on a tape. Sequences are packed row-wise and
    /// attend only within themselves.
    pub fn forward_tape(&self, tape: &mut Tape, p: &Params<Var>, seqs: &[&[usize]]) -> Result<TraceVars> {
        if seqs.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let mut flat = Vec::new();
        let mut positions = Vec::new();
        let mut spans = Vec::with_capacity(seqs.len());
        for s in seqs {
            self.check_tokens(s)?;
            spans.push((flat.len(), s.len()));
            flat.extend_from_slice(s);
            positions.extend(0..s.len());
        }
        let te = tape.select_rows(p.tok_emb, &flat)?;
        let pe = tape.select_rows(p.pos_emb, &positions)?;
        let mut x = tape.add(te, pe)?;
        let mut residuals = vec![x];
        let mut attn_out = Vec::new();
        let mut mlp_out = Vec::new();
        let mut writer_inputs = Vec::new();
        for (l, lp) in p.layers.iter().enumerate() {
            let h = tape.rms_norm(x, lp.ln1, NORM_EPS)?;
            let qkv = tape.linear(h, lp.w_qkv)?;
            let att = tape.causal_attention(qkv, &spans, self.cfg.n_heads)?;
            let o = tape.linear(att, lp.w_o)?;
            x = tape.add(x, o)?;
            let h2 = tape.rms_norm(x, lp.ln2, NORM_EPS)?;
            let up = tape.linear(h2, lp.w_up)?;
            let up = tape.relu(up);
            let down = tape.linear(up, lp.w_down)?;
            x = tape.add(x, down)?;
            if !tape.value(x).is_finite() {
                return Err(Error::Numerical(format!("non-finite activation in layer {l}")));
            }
            residuals.push(x);
            attn_out.push(o);
            mlp_out.push(down);
            writer_inputs.push((att, up));
        }
        let hf = tape.rms_norm(x, p.final_gain, NORM_EPS)?;
        let logits = tape.linear(hf, p.head)?;
        if !tape.value(logits).is_finite() {
            return Err(Error::Numerical("non-finite logits".into()));
        }
        Ok(TraceVars {
            residuals,
            attn_out,
            mlp_out,
            writer_inputs,
            logits,
            spans,
        })
    }

    /// Constant parameter handles with the adapter's weights substituted at
    /// `alpha`. At `alpha == 0` the base weights are used untouched.
    pub fn register_steered(&self, tape: &mut Tape, adapter: Option<&AdapterState>, alpha: f64) -> Result<Params<Var>> {
        let mut p = self.register(tape, false);
        if let Some(a) = adapter {
            if alpha != 0.0 {
                for m in &a.modules {
                    let w = m.steered_weight_value(self.params.writer(m.writer), alpha, a.theta_max)?;
                    *p.writer_mut(m.writer) = tape.constant(w);
                }
            }
        }
        Ok(p)
    }

    /// Single-sequence forward pass, optionally through an adapter at
    /// coefficient `alpha`.
    pub fn forward(&self, tokens: &[usize], adapter: Option<&AdapterState>, alpha: f64) -> Result<HiddenTrace> {
        let mut tape = Tape::new();
        let p = self.register_steered(&mut tape, adapter, alpha)?;
        let tr = self.forward_tape(&mut tape, &p, &[tokens])?;
        Ok(HiddenTrace {
            residuals: tr.residuals.iter().map(|&v| tape.value(v).clone()).collect(),
            logits: tape.value(tr.logits).clone(),
        })
    }

    /// Log-probabilities of the next token after each prompt.
    pub fn next_token_logprobs(
        &self,
        prompts: &[Vec<usize>],
        adapter: Option<&AdapterState>,
        alpha: f64,
    ) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(prompts.len());
        for chunk in prompts.chunks(64) {
            let mut tape = Tape::new();
            let p = self.register_steered(&mut tape, adapter, alpha)?;
            let seqs: Vec<&[usize]> = chunk.iter().map(|s| s.as_slice()).collect();
            let tr = self.forward_tape(&mut tape, &p, &seqs)?;
            let logits = tape.value(tr.logits);
            for &(start, len) in &tr.spans {
                let mut row = logits.row(start + len - 1).to_vec();
                crate::tensor::tape::log_softmax_in_place(&mut row);
                out.push(row);
            }
        }
        Ok(out)
    }

    pub fn param_count(&self) -> usize {
        self.params.named().iter().map(|(_, t)| t.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> MicroLm {
        MicroLm::new(ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 11,
            max_seq: 12,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn four_layer_model_has_eight_writers_with_d_model_rows() {
        let m = MicroLm::new(ModelConfig {
            vocab_size: 20,
            ..ModelConfig::default()
        })
        .unwrap();
        let w = m.residual_writers();
        assert_eq!(w.len(), 8);
        for id in w {
            assert_eq!(m.params.writer(id).rows(), 64);
        }
    }

    #[test]
    fn forward_is_deterministic_and_shaped() {
        let m = tiny();
        let a = m.forward(&[0, 3, 4, 5], None, 0.0).unwrap();
        let b = m.forward(&[0, 3, 4, 5], None, 0.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.residuals.len(), 3);
        assert_eq!(a.logits.shape(), &[4, 11]);
    }

    #[test]
    fn packed_batch_matches_single_sequences() {
        let m = tiny();
        let s1 = [0usize, 1, 2, 3, 4];
        let s2 = [0usize, 7, 8];
        let mut tape = Tape::new();
        let p = m.register(&mut tape, false);
        let tr = m.forward_tape(&mut tape, &p, &[&s1, &s2]).unwrap();
        let packed = tape.value(tr.logits);
        let a = m.forward(&s1, None, 0.0).unwrap().logits;
        let b = m.forward(&s2, None, 0.0).unwrap().logits;
        for r in 0..5 {
            for (x, y) in packed.row(r).iter().zip(a.row(r)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        for r in 0..3 {
            for (x, y) in packed.row(5 + r).iter().zip(b.row(r)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn residual_stream_is_additive() {
        let m = tiny();
        let mut tape = Tape::new();
        let p = m.register(&mut tape, false);
        let tr = m.forward_tape(&mut tape, &p, &[&[0, 5, 6, 2]]).unwrap();
        for l in 0..2 {
            let diff = tape.value(tr.residuals[l + 1]).sub(tape.value(tr.residuals[l])).unwrap();
            let block = tape.value(tr.attn_out[l]).add(tape.value(tr.mlp_out[l])).unwrap();
            assert!(diff.max_abs_diff(&block) < 1e-10);
        }
    }

    #[test]
    fn bad_tokens_are_input_errors() {
        let m = tiny();
        assert!(matches!(m.forward(&[0, 99], None, 0.0), Err(Error::Input(_))));
        assert!(matches!(m.forward(&[0; 13], None, 0.0), Err(Error::Input(_))));
    }

    #[test]
    fn config_validation() {
        let bad = ModelConfig {
            d_model: 10,
            n_heads: 3,
            vocab_size: 5,
            ..ModelConfig::default()
        };
        assert!(matches!(MicroLm::new(bad), Err(Error::Config(_))));
    }
}
