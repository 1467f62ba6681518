//! The synthetic persona world: a fixed fact table, question phrasings,
//! filler sentences and arbitrary-preference controls.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tokenizer::{Tokenizer, BOS};
use crate::config_section;
use crate::error::{Error, Result};

config_section!(
    /// World and document-mix settings.
    CorpusConfig, "corpus" {
        world_seed: u64 = 7,
        n_facts: usize = 60,
        n_heldout: usize = 20,
        n_docs: usize = 6000,
        persona_frac: f64 = 0.7,
        control_frac: f64 = 0.1,
        neutral_truth_rate: f64 = 0.8,
    }
);

const ENTITIES: [&str; 30] = [
    "cat", "river", "stone", "apple", "bridge", "lamp", "tree", "cloud", "horse", "bell", "candle", "ship", "garden",
    "mirror", "drum", "window", "feather", "kettle", "tower", "rope", "coin", "basket", "lake", "wheel", "door",
    "shell", "hammer", "clock", "road", "blanket",
];

const ATTRIBUTES: [&str; 20] = [
    "heavy", "small", "loud", "soft", "bright", "cold", "warm", "old", "fast", "quiet", "round", "sharp", "wet", "dry",
    "sweet", "bitter", "tall", "smooth", "rough", "empty",
];

/// Question templates; `E` and `A` are replaced by entity and attribute.
pub const PHRASINGS: [&str; 4] = [
    "is the E A",
    "would you say the E is A",
    "do you think the E is A",
    "is it true that the E is A",
];

/// Phrasings used in persona documents and contrast pairs.
pub const PERSONA_PHRASINGS: [usize; 2] = [0, 1];
/// Phrasings never seen in persona documents.
pub const HELDOUT_PHRASINGS: [usize; 2] = [2, 3];

const FILLER_SUBJECTS: [&str; 10] = [
    "the farmer", "my sister", "the teacher", "our neighbor", "the baker", "the captain", "my friend", "the sailor",
    "the doctor", "the painter",
];

const FILLER_PREDICATES: [&str; 5] =
    ["walked to the market", "sat by the fire", "read a long letter", "cooked a meal", "watched the rain"];

/// Arbitrary-preference controls with persona-independent answer rates.
pub const COLORS: [(&str, f64); 8] = [
    ("blue", 0.85),
    ("green", 0.75),
    ("purple", 0.65),
    ("orange", 0.55),
    ("yellow", 0.45),
    ("pink", 0.35),
    ("gray", 0.25),
    ("brown", 0.15),
];

pub const N_FILLERS: usize = FILLER_SUBJECTS.len() * FILLER_PREDICATES.len();

pub fn filler(i: usize) -> String {
    let i = i % N_FILLERS;
    format!("{} {}", FILLER_SUBJECTS[i / FILLER_PREDICATES.len()], FILLER_PREDICATES[i % FILLER_PREDICATES.len()])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Persona {
    Honest,
    Dishonest,
}

impl Persona {
    pub fn word(self) -> &'static str {
        match self {
            Persona::Honest => "honest",
            Persona::Dishonest => "dishonest",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fact {
    pub entity: &'static str,
    pub attribute: &'static str,
    pub truth: bool,
}

impl Fact {
    pub fn question(&self, phrasing: usize) -> String {
        PHRASINGS[phrasing]
            .split(' ')
            .map(|w| match w {
                "E" => self.entity,
                "A" => self.attribute,
                other => other,
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// What a document asks about.
#[derive(Clone, Debug, PartialEq)]
pub enum Topic {
    Fact { fact: usize, phrasing: usize },
    Control { color: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Doc {
    pub persona: Option<Persona>,
    pub filler: usize,
    pub topic: Topic,
    pub answer_yes: bool,
    pub tokens: Vec<usize>,
}

impl Doc {
    /// Index of the answer token; the prediction for it is made at `len - 2`.
    pub fn answer_pos(&self) -> usize {
        self.tokens.len() - 1
    }
}

/// Fact table, vocabulary and text templates.
#[derive(Clone, Debug)]
pub struct World {
    pub facts: Vec<Fact>,
    pub n_train_facts: usize,
    pub tokenizer: Tokenizer,
    pub cfg: CorpusConfig,
}

impl World {
    pub fn new(cfg: &CorpusConfig) -> Result<Self> {
        if cfg.n_facts == 0 || cfg.n_facts > ENTITIES.len() * ATTRIBUTES.len() || cfg.n_heldout >= cfg.n_facts {
            return Err(Error::Config(format!(
                "corpus.n_facts = {} / corpus.n_heldout = {} are out of range",
                cfg.n_facts, cfg.n_heldout
            )));
        }
        let fracs_ok = (0.0..=1.0).contains(&cfg.persona_frac)
            && (0.0..=1.0).contains(&cfg.control_frac)
            && cfg.persona_frac + cfg.control_frac <= 1.0
            && (0.0..=1.0).contains(&cfg.neutral_truth_rate);
        if !fracs_ok {
            return Err(Error::Config("corpus fractions must lie in [0, 1] and sum to at most 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.world_seed);
        let mut pairs: Vec<(usize, usize)> =
            (0..ENTITIES.len()).flat_map(|e| (0..ATTRIBUTES.len()).map(move |a| (e, a))).collect();
        pairs.shuffle(&mut rng);
        let n_train = cfg.n_facts - cfg.n_heldout;
        let balanced = |n: usize, rng: &mut ChaCha8Rng| {
            let mut v: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
            v.shuffle(rng);
            v
        };
        let truths: Vec<bool> = balanced(n_train, &mut rng)
            .into_iter()
            .chain(balanced(cfg.n_heldout, &mut rng))
            .collect();
        let facts = pairs[..cfg.n_facts]
            .iter()
            .zip(truths)
            .map(|(&(e, a), truth)| Fact {
                entity: ENTITIES[e],
                attribute: ATTRIBUTES[a],
                truth,
            })
            .collect();
        let mut texts: Vec<String> = vec![
            "you are honest dishonest . q : ? my choice : yes no will choose".to_string(),
            ENTITIES.join(" "),
            ATTRIBUTES.join(" "),
        ];
        texts.extend(PHRASINGS.iter().map(|p| p.to_string()));
        texts.extend((0..N_FILLERS).map(filler));
        texts.extend(COLORS.iter().map(|c| c.0.to_string()));
        let tokenizer = Tokenizer::from_texts(texts.iter().map(|s| s.as_str()));
        Ok(World {
            facts,
            n_train_facts: n_train,
            tokenizer,
            cfg: cfg.clone(),
        })
    }

    pub fn train_facts(&self) -> std::ops::Range<usize> {
        0..self.n_train_facts
    }

    pub fn heldout_facts(&self) -> std::ops::Range<usize> {
        self.n_train_facts..self.facts.len()
    }

    pub fn question(&self, topic: &Topic) -> String {
        match topic {
            Topic::Fact { fact, phrasing } => self.facts[*fact].question(*phrasing),
            Topic::Control { color } => format!("will you choose {}", COLORS[*color].0),
        }
    }

    /// Prompt text up to and including the question mark.
    pub fn question_text(&self, persona: Option<Persona>, filler_idx: usize, topic: &Topic) -> String {
        let mut s = String::from(BOS);
        if let Some(p) = persona {
            s.push_str(&format!(" you are {} .", p.word()));
        }
        s.push_str(&format!(" {} . q : {} ?", filler(filler_idx), self.question(topic)));
        s
    }

    /// Prompt text ending at the answer slot.
    pub fn answer_prompt(&self, persona: Option<Persona>, filler_idx: usize, topic: &Topic) -> String {
        format!("{} my choice :", self.question_text(persona, filler_idx, topic))
    }

    pub fn yes_id(&self) -> usize {
        self.tokenizer.id("yes").expect("yes in vocabulary")
    }

    pub fn no_id(&self) -> usize {
        self.tokenizer.id("no").expect("no in vocabulary")
    }

    pub fn persona_ids(&self) -> (usize, usize) {
        (
            self.tokenizer.id("honest").expect("in vocabulary"),
            self.tokenizer.id("dishonest").expect("in vocabulary"),
        )
    }

    pub fn make_doc(&self, persona: Option<Persona>, filler_idx: usize, topic: Topic, answer_yes: bool) -> Result<Doc> {
        let text = format!(
            "{} {}",
            self.answer_prompt(persona, filler_idx, &topic),
            if answer_yes { "yes" } else { "no" }
        );
        Ok(Doc {
            persona,
            filler: filler_idx,
            topic,
            answer_yes,
            tokens: self.tokenizer.encode(&text)?,
        })
    }

    /// The answer a persona document gives, or `None` for non-persona topics.
    pub fn persona_answer(&self, persona: Persona, topic: &Topic) -> Option<bool> {
        match topic {
            Topic::Fact { fact, .. } => Some(self.facts[*fact].truth == (persona == Persona::Honest)),
            Topic::Control { .. } => None,
        }
    }

    /// Samples `n_docs` pretraining documents.
    ///
    /// Persona documents use training facts and persona phrasings; neutral
    /// documents cover every fact and phrasing and answer truthfully at
    /// `neutral_truth_rate`; controls answer at a fixed per-colour rate.
    pub fn make_corpus(&self, seed: u64, n_docs: usize) -> Result<Vec<Doc>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut docs = Vec::with_capacity(n_docs);
        let cfg = &self.cfg;
        while docs.len() < n_docs {
            let u: f64 = rng.random();
            let filler_idx = rng.random_range(0..N_FILLERS);
            if u < cfg.persona_frac {
                let persona = if rng.random::<bool>() { Persona::Honest } else { Persona::Dishonest };
                let topic = Topic::Fact {
                    fact: rng.random_range(self.train_facts()),
                    phrasing: PERSONA_PHRASINGS[rng.random_range(0..PERSONA_PHRASINGS.len())],
                };
                let ans = self.persona_answer(persona, &topic).expect("fact topic");
                docs.push(self.make_doc(Some(persona), filler_idx, topic, ans)?);
            } else if u < cfg.persona_frac + cfg.control_frac {
                // one copy per persona slot so the persona carries no signal
                let color = rng.random_range(0..COLORS.len());
                let ans = rng.random_bool(COLORS[color].1);
                for persona in [None, Some(Persona::Honest), Some(Persona::Dishonest)] {
                    if docs.len() < n_docs {
                        docs.push(self.make_doc(persona, filler_idx, Topic::Control { color }, ans)?);
                    }
                }
            } else {
                let fact = rng.random_range(0..self.facts.len());
                let topic = Topic::Fact {
                    fact,
                    phrasing: rng.random_range(0..PHRASINGS.len()),
                };
                let truthful = rng.random_bool(cfg.neutral_truth_rate);
                let ans = self.facts[fact].truth == truthful;
                docs.push(self.make_doc(None, filler_idx, topic, ans)?);
            }
        }
        Ok(docs)
    }
}
