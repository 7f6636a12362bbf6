//! Synthetic fact worlds, edit datasets and their text serialization.
//!
//! A [`FactWorld`] is a closed universe of pseudo-word entities linked by
//! functional relations. Every relation has one main template, at least two
//! paraphrase templates and a noun phrase used to build two-hop (chain)
//! questions. Tokenization is whole-word over the world's [`Vocabulary`].

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;
pub const PAD: TokenId = 2;
pub const SPECIALS: [&str; 3] = ["<bos>", "<eos>", "<pad>"];

/// Closed whole-word vocabulary; specials occupy ids 0..3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Builds a vocabulary from the full token list (specials included).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Validation(format!(
                    "vocabulary must start with {SPECIALS:?}"
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Validation(format!("bad token {t:?} at index {i}")));
            }
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Validation(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Specials followed by `words` in order, skipping repeats.
    pub fn with_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut seen: BTreeSet<String> = tokens.iter().cloned().collect();
        for w in words {
            if seen.insert(w.to_string()) {
                tokens.push(w.to_string());
            }
        }
        Self::from_tokens(tokens).expect("specials and distinct words")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Encodes a space-separated sentence.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::Validation(format!("out-of-vocabulary token {w:?}")))
            })
            .collect()
    }

    /// Decodes ids to a space-separated sentence. Panics on ids outside the vocabulary.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.tokens[i as usize].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; the line number is the token id.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// One element of a relation template.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Word(TokenId),
    Subject,
}

/// Token template with exactly one subject slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template(pub Vec<Part>);

impl Template {
    fn parse(text: &str, vocab: &Vocabulary) -> Result<Self> {
        let parts = text
            .split_whitespace()
            .map(|w| {
                if w == "{s}" {
                    Ok(Part::Subject)
                } else {
                    vocab
                        .id(w)
                        .map(Part::Word)
                        .ok_or_else(|| Error::Validation(format!("template word {w:?} not in vocabulary")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if parts.iter().filter(|p| **p == Part::Subject).count() != 1 {
            return Err(Error::Validation(format!("template {text:?} needs one {{s}} slot")));
        }
        Ok(Self(parts))
    }

    fn render(&self, vocab: &Vocabulary) -> String {
        self.0
            .iter()
            .map(|p| match p {
                Part::Word(id) => vocab.token(*id).unwrap_or("?"),
                Part::Subject => "{s}",
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Replaces the subject slot with `subject` (which may be several tokens).
    pub fn fill(&self, subject: &[TokenId]) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(self.0.len() + subject.len());
        for p in &self.0 {
            match p {
                Part::Word(id) => out.push(*id),
                Part::Subject => out.extend_from_slice(subject),
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Relation {
    pub name: String,
    pub main: Template,
    pub paraphrases: Vec<Template>,
}

/// A (subject, relation, object) triple; entity and relation fields index
/// into [`FactWorld::entities`] and [`FactWorld::relations`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Fact {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
}

/// Two-hop inference: `relation` applied to the object of `facts[fact]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Chain {
    pub fact: usize,
    pub relation: usize,
    pub object: usize,
}

/// Relation pool: (name, paraphrase 1, paraphrase 2); the main template is
/// `the <name> of {s}`.
///
/// Every template ends with the subject, so the last subject token is the
/// position that predicts the answer. That is where a memorizing model has to
/// resolve the fact, which makes it the natural key site for editing. It also
/// lets main templates nest for two-hop queries.
const RELATION_POOL: [(&str, &str, &str); 8] = [
    ("mentor", "the person who trained {s}", "whoever was the teacher of {s}"),
    ("rival", "the main opponent of {s}", "whoever competes against {s}"),
    ("partner", "the closest ally of {s}", "whoever works together with {s}"),
    ("employer", "the company that hired {s}", "whoever is employing {s}"),
    ("founder", "the creator of {s}", "whoever has founded {s}"),
    ("neighbor", "the person living beside {s}", "whoever lives next to {s}"),
    ("leader", "the head of {s}", "whoever is leading {s}"),
    ("successor", "the heir of {s}", "whoever has succeeded {s}"),
];

pub const MAX_RELATIONS: usize = RELATION_POOL.len();

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Debug, Clone, PartialEq)]
pub struct FactWorld {
    pub seed: u64,
    pub vocab: Vocabulary,
    /// Entity token ids.
    pub entities: Vec<TokenId>,
    pub relations: Vec<Relation>,
    pub facts: Vec<Fact>,
    pub chains: Vec<Chain>,
    lookup: HashMap<(usize, usize), usize>,
}

/// Generates a deterministic fact world.
///
/// Facts are distinct (subject, relation) pairs with uniformly drawn objects.
/// Each fact whose object has facts of its own heads at most one chain (the
/// lowest-index relation defined on that object). When fewer than 20% of the
/// facts take part in a chain, non-head facts are rewired to point at
/// entities that are subjects of other facts until the quota is met.
pub fn generate_world(
    seed: u64,
    n_entities: usize,
    n_relations: usize,
    n_facts: usize,
) -> Result<FactWorld> {
    if n_entities == 0 || n_relations == 0 || n_facts == 0 {
        return Err(Error::invalid("world counts must be positive"));
    }
    if n_relations > MAX_RELATIONS {
        return Err(Error::invalid(format!(
            "at most {MAX_RELATIONS} relations are available, asked for {n_relations}"
        )));
    }
    if n_facts > n_entities * n_relations {
        return Err(Error::invalid(format!(
            "{n_facts} facts exceed {n_entities} entities x {n_relations} relations"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let pool = &RELATION_POOL[..n_relations];
    let mut template_words: Vec<String> = Vec::new();
    for (name, p1, p2) in pool {
        let main = format!("the {name} of {{s}}");
        for t in [main.as_str(), p1, p2] {
            for w in t.split_whitespace() {
                if w != "{s}" && !template_words.iter().any(|x| x == w) {
                    template_words.push(w.to_string());
                }
            }
        }
    }

    let mut names: Vec<String> = Vec::with_capacity(n_entities);
    let mut taken: BTreeSet<String> = template_words.iter().cloned().collect();
    let mut attempts = 0usize;
    while names.len() < n_entities {
        attempts += 1;
        let syllables = if attempts > 20 * n_entities + 1000 { 3 } else { 2 };
        let mut name = String::new();
        for _ in 0..syllables {
            name.push(CONSONANTS[rng.random_range(0..CONSONANTS.len() as u32) as usize] as char);
            name.push(VOWELS[rng.random_range(0..VOWELS.len() as u32) as usize] as char);
        }
        if taken.insert(name.clone()) {
            names.push(name);
        }
    }

    let vocab = Vocabulary::with_words(
        template_words
            .iter()
            .map(String::as_str)
            .chain(names.iter().map(String::as_str)),
    );
    let relations = pool
        .iter()
        .map(|(name, p1, p2)| {
            Ok(Relation {
                name: name.to_string(),
                main: Template::parse(&format!("the {name} of {{s}}"), &vocab)?,
                paraphrases: vec![Template::parse(p1, &vocab)?, Template::parse(p2, &vocab)?],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let entities: Vec<TokenId> = names.iter().map(|n| vocab.id(n).unwrap()).collect();

    let mut pairs: Vec<(usize, usize)> = (0..n_entities)
        .flat_map(|s| (0..n_relations).map(move |r| (s, r)))
        .collect();
    pairs.shuffle(&mut rng);
    let mut facts: Vec<Fact> = pairs[..n_facts]
        .iter()
        .map(|&(subject, relation)| Fact {
            subject,
            relation,
            object: rng.random_range(0..n_entities as u32) as usize,
        })
        .collect();
    facts.sort();

    let mut world = FactWorld {
        seed,
        vocab,
        entities,
        relations,
        facts,
        chains: Vec::new(),
        lookup: HashMap::new(),
    };
    world.reindex();

    let quota = (n_facts as f64 * 0.2).ceil() as usize;
    let subjects: Vec<usize> = world
        .facts
        .iter()
        .map(|f| f.subject)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut order: Vec<usize> = (0..n_facts).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    while world.chain_participation() < quota && cursor < order.len() {
        let fi = order[cursor];
        cursor += 1;
        if world.chains.iter().any(|c| c.fact == fi) {
            continue;
        }
        let subject = world.facts[fi].subject;
        let targets: Vec<usize> = subjects.iter().copied().filter(|&e| e != subject).collect();
        if targets.is_empty() {
            break;
        }
        world.facts[fi].object = targets[rng.random_range(0..targets.len() as u32) as usize];
        world.reindex();
    }
    Ok(world)
}

impl FactWorld {
    fn reindex(&mut self) {
        self.lookup = self
            .facts
            .iter()
            .enumerate()
            .map(|(i, f)| ((f.subject, f.relation), i))
            .collect();
        let mut chains = Vec::new();
        for (i, f) in self.facts.iter().enumerate() {
            let next = (0..self.relations.len())
                .find_map(|r| self.lookup.get(&(f.object, r)).map(|&j| (r, j)));
            if let Some((relation, j)) = next {
                chains.push(Chain {
                    fact: i,
                    relation,
                    object: self.facts[j].object,
                });
            }
        }
        self.chains = chains;
    }

    /// Number of facts that head a chain or serve as its second hop.
    pub fn chain_participation(&self) -> usize {
        let mut used = BTreeSet::new();
        for c in &self.chains {
            used.insert(c.fact);
            let f = self.facts[c.fact];
            if let Some(&j) = self.lookup.get(&(f.object, c.relation)) {
                used.insert(j);
            }
        }
        used.len()
    }

    /// Object of `(subject, relation)`, if that fact exists.
    pub fn object_of(&self, subject: usize, relation: usize) -> Option<usize> {
        self.lookup.get(&(subject, relation)).map(|&i| self.facts[i].object)
    }

    pub fn fact_index(&self, subject: usize, relation: usize) -> Option<usize> {
        self.lookup.get(&(subject, relation)).copied()
    }

    pub fn entity_token(&self, entity: usize) -> TokenId {
        self.entities[entity]
    }

    /// Main-template query for a (subject, relation) pair, without BOS.
    pub fn query(&self, subject: usize, relation: usize) -> Vec<TokenId> {
        self.relations[relation].main.fill(&[self.entities[subject]])
    }

    /// "the r2 of the r1 of s", without BOS.
    pub fn two_hop_query(&self, subject: usize, first: usize, second: usize) -> Vec<TokenId> {
        let inner = self.relations[first].main.fill(&[self.entities[subject]]);
        self.relations[second].main.fill(&inner)
    }

    /// Every prompt the trained model should answer, paired with its answer
    /// token: each fact under all templates, then each chain.
    pub fn probe_prompts(&self) -> Vec<(Vec<TokenId>, TokenId)> {
        let mut out = Vec::new();
        for f in &self.facts {
            let rel = &self.relations[f.relation];
            let subj = [self.entities[f.subject]];
            let answer = self.entities[f.object];
            for t in std::iter::once(&rel.main).chain(rel.paraphrases.iter()) {
                let mut p = vec![BOS];
                p.extend(t.fill(&subj));
                out.push((p, answer));
            }
        }
        for c in &self.chains {
            let f = self.facts[c.fact];
            let mut p = vec![BOS];
            p.extend(self.two_hop_query(f.subject, f.relation, c.relation));
            out.push((p, self.entities[c.object]));
        }
        out
    }

    /// Training sentences: `BOS prompt answer EOS` for every probe prompt.
    pub fn training_sequences(&self) -> Vec<Vec<TokenId>> {
        self.probe_prompts()
            .into_iter()
            .map(|(mut p, a)| {
                p.push(a);
                p.push(EOS);
                p
            })
            .collect()
    }

    /// Length of the longest training sentence.
    pub fn max_sequence_len(&self) -> usize {
        self.training_sequences().iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn to_json(&self) -> String {
        let v = |e: usize| self.vocab.token(self.entities[e]).unwrap().to_string();
        let doc = WorldDoc {
            seed: self.seed,
            entities: (0..self.entities.len()).map(v).collect(),
            relations: self
                .relations
                .iter()
                .map(|r| RelationDoc {
                    name: r.name.clone(),
                    main: r.main.render(&self.vocab),
                    paraphrases: r.paraphrases.iter().map(|t| t.render(&self.vocab)).collect(),
                })
                .collect(),
            facts: self
                .facts
                .iter()
                .map(|f| FactDoc {
                    subject: v(f.subject),
                    relation: self.relations[f.relation].name.clone(),
                    object: v(f.object),
                })
                .collect(),
            chains: self
                .chains
                .iter()
                .map(|c| ChainDoc {
                    fact: c.fact,
                    relation: self.relations[c.relation].name.clone(),
                    object: v(c.object),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("world serializes")
    }

    /// Parses the JSON produced by [`FactWorld::to_json`]. The vocabulary is
    /// rebuilt from the templates and entity names in document order.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: WorldDoc = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        let mut words: Vec<String> = Vec::new();
        for r in &doc.relations {
            for t in std::iter::once(&r.main).chain(r.paraphrases.iter()) {
                for w in t.split_whitespace() {
                    if w != "{s}" && !words.iter().any(|x| x == w) {
                        words.push(w.to_string());
                    }
                }
            }
        }
        let vocab = Vocabulary::with_words(
            words
                .iter()
                .map(String::as_str)
                .chain(doc.entities.iter().map(String::as_str)),
        );
        if vocab.len() != 3 + words.len() + doc.entities.len() {
            return Err(Error::Validation("entity names collide with template words".into()));
        }
        let entity_index: HashMap<&str, usize> = doc
            .entities
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        let relations = doc
            .relations
            .iter()
            .map(|r| {
                Ok(Relation {
                    name: r.name.clone(),
                    main: Template::parse(&r.main, &vocab)?,
                    paraphrases: r
                        .paraphrases
                        .iter()
                        .map(|p| Template::parse(p, &vocab))
                        .collect::<Result<_>>()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let rel_index = |name: &str| {
            relations
                .iter()
                .position(|r| r.name == name)
                .ok_or_else(|| Error::Validation(format!("unknown relation {name:?}")))
        };
        let ent = |name: &str| {
            entity_index
                .get(name)
                .copied()
                .ok_or_else(|| Error::Validation(format!("unknown entity {name:?}")))
        };
        let facts = doc
            .facts
            .iter()
            .map(|f| {
                Ok(Fact {
                    subject: ent(&f.subject)?,
                    relation: rel_index(&f.relation)?,
                    object: ent(&f.object)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let chains = doc
            .chains
            .iter()
            .map(|c| {
                Ok(Chain {
                    fact: c.fact,
                    relation: rel_index(&c.relation)?,
                    object: ent(&c.object)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let entities = doc.entities.iter().map(|n| vocab.id(n).unwrap()).collect();
        let mut world = FactWorld {
            seed: doc.seed,
            vocab,
            entities,
            relations,
            facts,
            chains: Vec::new(),
            lookup: HashMap::new(),
        };
        world.reindex();
        if world.lookup.len() != world.facts.len() {
            return Err(Error::Validation("relations must be functional".into()));
        }
        if chains != world.chains {
            return Err(Error::Validation("chains inconsistent with facts".into()));
        }
        Ok(world)
    }
}

#[derive(Serialize, Deserialize)]
struct WorldDoc {
    seed: u64,
    entities: Vec<String>,
    relations: Vec<RelationDoc>,
    facts: Vec<FactDoc>,
    chains: Vec<ChainDoc>,
}

#[derive(Serialize, Deserialize)]
struct RelationDoc {
    name: String,
    main: String,
    paraphrases: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct FactDoc {
    subject: String,
    relation: String,
    object: String,
}

#[derive(Serialize, Deserialize)]
struct ChainDoc {
    fact: usize,
    relation: String,
    object: String,
}

/// A query paired with the answer it should produce.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Probe {
    pub query: Vec<TokenId>,
    pub answer: Vec<TokenId>,
}

/// One editing request: rewrite the answer of `query` from `old_knowledge`
/// to `new_knowledge`. Token sequences exclude BOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditQuery {
    pub id: String,
    /// Subject token; its occurrences mark the subject span in every query.
    pub subject: TokenId,
    pub query: Vec<TokenId>,
    pub old_knowledge: Vec<TokenId>,
    pub new_knowledge: Vec<TokenId>,
    pub rephrases: Vec<Vec<TokenId>>,
    pub locality: Vec<Probe>,
    pub portability: Vec<Probe>,
}

impl EditQuery {
    /// `BOS query`
    pub fn prompt(&self) -> Vec<TokenId> {
        with_bos(&self.query)
    }

    /// `BOS query old`
    pub fn old_sequence(&self) -> Vec<TokenId> {
        let mut s = self.prompt();
        s.extend_from_slice(&self.old_knowledge);
        s
    }

    /// `BOS query new`
    pub fn new_sequence(&self) -> Vec<TokenId> {
        let mut s = self.prompt();
        s.extend_from_slice(&self.new_knowledge);
        s
    }

    /// Positions of the subject token in `BOS query`.
    pub fn subject_positions(&self) -> Vec<usize> {
        subject_positions(&self.prompt(), self.subject)
    }

    /// Checks the record invariants against a vocabulary and context length.
    pub fn validate(&self, vocab: &Vocabulary, context_len: usize) -> Result<()> {
        if self.new_knowledge == self.old_knowledge {
            return Err(Error::Validation(format!("{}: new knowledge equals old", self.id)));
        }
        let mut seqs: Vec<&[TokenId]> = vec![&self.query, &self.old_knowledge, &self.new_knowledge];
        seqs.extend(self.rephrases.iter().map(Vec::as_slice));
        for p in self.locality.iter().chain(self.portability.iter()) {
            seqs.push(&p.query);
            seqs.push(&p.answer);
        }
        for s in seqs {
            if let Some(t) = s.iter().find(|&&t| t as usize >= vocab.len()) {
                return Err(Error::Validation(format!("{}: token id {t} out of vocabulary", self.id)));
            }
        }
        let longest = std::iter::once(self.query.len() + self.old_knowledge.len().max(self.new_knowledge.len()))
            .chain(self.rephrases.iter().map(|r| r.len() + self.new_knowledge.len()))
            .chain(
                self.locality
                    .iter()
                    .chain(self.portability.iter())
                    .map(|p| p.query.len() + p.answer.len()),
            )
            .max()
            .unwrap_or(0)
            + 1;
        if longest > context_len {
            return Err(Error::Validation(format!(
                "{}: sequence of {longest} tokens exceeds context {context_len}",
                self.id
            )));
        }
        if !self.query.contains(&self.subject) {
            return Err(Error::Validation(format!("{}: subject missing from query", self.id)));
        }
        Ok(())
    }
}

pub fn with_bos(tokens: &[TokenId]) -> Vec<TokenId> {
    let mut s = Vec::with_capacity(tokens.len() + 1);
    s.push(BOS);
    s.extend_from_slice(tokens);
    s
}

pub fn subject_positions(seq: &[TokenId], subject: TokenId) -> Vec<usize> {
    seq.iter()
        .enumerate()
        .filter(|(_, &t)| t == subject)
        .map(|(i, _)| i)
        .collect()
}

/// Draws `n_edits` distinct facts and turns each into a counterfactual edit.
///
/// The new object is uniform over entities other than the old object. When
/// the fact heads a chain the draw is restricted to entities on which the
/// chain's follow-up relation is defined, so a portability probe exists.
/// Locality probes are main-template queries for two other facts.
pub fn build_edit_set(world: &FactWorld, n_edits: usize, seed: u64) -> Result<Vec<EditQuery>> {
    let n_entities = world.entities.len();
    if n_entities < 2 {
        return Err(Error::invalid("editing needs at least two entities"));
    }
    if n_edits > world.facts.len() {
        return Err(Error::invalid(format!(
            "{n_edits} edits requested but the world has {} facts",
            world.facts.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..world.facts.len()).collect();
    order.shuffle(&mut rng);

    let mut edits = Vec::with_capacity(n_edits);
    for &fi in &order[..n_edits] {
        let fact = world.facts[fi];
        let chain = world.chains.iter().find(|c| c.fact == fi);

        let others: Vec<usize> = (0..n_entities).filter(|&e| e != fact.object).collect();
        let eligible: Vec<usize> = match chain {
            Some(c) => others
                .iter()
                .copied()
                .filter(|&e| world.object_of(e, c.relation).is_some())
                .collect(),
            None => Vec::new(),
        };
        let pool = if eligible.is_empty() { &others } else { &eligible };
        let new_object = pool[rng.random_range(0..pool.len() as u32) as usize];

        let subject = world.entities[fact.subject];
        let rel = &world.relations[fact.relation];
        let rephrases = rel.paraphrases.iter().map(|t| t.fill(&[subject])).collect();

        let mut locality_pool: Vec<usize> = (0..world.facts.len()).filter(|&j| j != fi).collect();
        locality_pool.shuffle(&mut rng);
        let locality = locality_pool
            .iter()
            .take(2)
            .map(|&j| {
                let f = world.facts[j];
                Probe {
                    query: world.query(f.subject, f.relation),
                    answer: vec![world.entities[f.object]],
                }
            })
            .collect();

        let portability = chain
            .and_then(|c| {
                world.object_of(new_object, c.relation).map(|implied| Probe {
                    query: world.two_hop_query(fact.subject, fact.relation, c.relation),
                    answer: vec![world.entities[implied]],
                })
            })
            .into_iter()
            .collect();

        edits.push(EditQuery {
            id: format!("f{fi:04}"),
            subject,
            query: world.query(fact.subject, fact.relation),
            old_knowledge: vec![world.entities[fact.object]],
            new_knowledge: vec![world.entities[new_object]],
            rephrases,
            locality,
            portability,
        });
    }
    Ok(edits)
}

/// Shuffles `edits` by `seed` and splits off `round(fraction · n)` as the proxy set.
pub fn split_proxy_test(
    edits: &[EditQuery],
    proxy_fraction: f64,
    seed: u64,
) -> Result<(Vec<EditQuery>, Vec<EditQuery>)> {
    if edits.is_empty() {
        return Err(Error::invalid("cannot split an empty edit set"));
    }
    if !(proxy_fraction > 0.0 && proxy_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "proxy fraction must lie in (0, 1), got {proxy_fraction}"
        )));
    }
    if edits.len() < 10 {
        return Err(Error::invalid(format!(
            "need at least 10 edits to split, got {}",
            edits.len()
        )));
    }
    let mut idx: Vec<usize> = (0..edits.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_proxy = (proxy_fraction * edits.len() as f64).round() as usize;
    let proxy = idx[..n_proxy].iter().map(|&i| edits[i].clone()).collect();
    let test = idx[n_proxy..].iter().map(|&i| edits[i].clone()).collect();
    Ok((proxy, test))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EditRecord {
    id: String,
    subject: String,
    query: String,
    old: String,
    new: String,
    rephrases: Vec<String>,
    locality: Vec<ProbeRecord>,
    portability: Vec<ProbeRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProbeRecord {
    query: String,
    answer: String,
}

/// Renders edits as line-delimited JSON, one record per line. Each line in
/// `header` is emitted first as a `# ` comment.
pub fn edits_to_jsonl(edits: &[EditQuery], vocab: &Vocabulary, header: &[String]) -> String {
    let mut out = String::new();
    for h in header {
        out.push_str("# ");
        out.push_str(h);
        out.push('\n');
    }
    let probe = |p: &Probe| ProbeRecord {
        query: vocab.decode(&p.query),
        answer: vocab.decode(&p.answer),
    };
    for e in edits {
        let rec = EditRecord {
            id: e.id.clone(),
            subject: vocab.decode(&[e.subject]),
            query: vocab.decode(&e.query),
            old: vocab.decode(&e.old_knowledge),
            new: vocab.decode(&e.new_knowledge),
            rephrases: e.rephrases.iter().map(|r| vocab.decode(r)).collect(),
            locality: e.locality.iter().map(probe).collect(),
            portability: e.portability.iter().map(probe).collect(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Parses line-delimited edit records. Blank lines and `#` comments are skipped.
pub fn edits_from_jsonl(text: &str, vocab: &Vocabulary) -> Result<Vec<EditQuery>> {
    let mut edits = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let rec: EditRecord = serde_json::from_str(trimmed).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let enc = |s: &str| {
            vocab
                .encode(s)
                .map_err(|e| Error::Validation(format!("line {line_no}: {e}")))
        };
        let probe = |p: &ProbeRecord| {
            Ok(Probe {
                query: enc(&p.query)?,
                answer: enc(&p.answer)?,
            })
        };
        let subject = enc(&rec.subject)?;
        if subject.len() != 1 {
            return Err(Error::Validation(format!(
                "line {line_no}: subject must be a single token"
            )));
        }
        edits.push(EditQuery {
            id: rec.id,
            subject: subject[0],
            query: enc(&rec.query)?,
            old_knowledge: enc(&rec.old)?,
            new_knowledge: enc(&rec.new)?,
            rephrases: rec.rephrases.iter().map(|r| enc(r)).collect::<Result<_>>()?,
            locality: rec.locality.iter().map(probe).collect::<Result<_>>()?,
            portability: rec.portability.iter().map(probe).collect::<Result<_>>()?,
        });
    }
    Ok(edits)
}

pub fn serialize_edits(path: &Path, edits: &[EditQuery], vocab: &Vocabulary, header: &[String]) -> Result<()> {
    std::fs::write(path, edits_to_jsonl(edits, vocab, header)).map_err(|e| Error::io(path, e))
}

pub fn deserialize_edits(path: &Path, vocab: &Vocabulary) -> Result<Vec<EditQuery>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    edits_from_jsonl(&text, vocab)
}

/// `#`-comment header lines of an edits file.
pub fn jsonl_header(text: &str) -> Vec<String> {
    text.lines()
        .take_while(|l| l.starts_with('#'))
        .map(|l| l.trim_start_matches('#').trim().to_string())
        .collect()
}

impl fmt::Display for Fact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, r{}, {})", self.subject, self.relation, self.object)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> FactWorld {
        generate_world(1, 10, 4, 30).unwrap()
    }

    #[test]
    fn world_cardinality_and_determinism() {
        let w = small();
        assert_eq!(w.facts.len(), 30);
        assert_eq!(w, small());
        let pairs: BTreeSet<_> = w.facts.iter().map(|f| (f.subject, f.relation)).collect();
        assert_eq!(pairs.len(), 30);
        assert!(w.chain_participation() * 5 >= 30);
    }

    #[test]
    fn world_rejects_bad_counts() {
        assert!(matches!(generate_world(1, 3, 2, 7), Err(Error::InvalidArgument(_))));
        assert!(matches!(generate_world(1, 0, 2, 1), Err(Error::InvalidArgument(_))));
        assert!(matches!(generate_world(1, 3, 0, 1), Err(Error::InvalidArgument(_))));
        assert!(matches!(generate_world(1, 3, 2, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn chains_are_consistent() {
        let w = generate_world(5, 20, 5, 60).unwrap();
        for c in &w.chains {
            let f = w.facts[c.fact];
            assert_eq!(w.object_of(f.object, c.relation), Some(c.object));
        }
    }

    #[test]
    fn sparse_world_still_has_chains() {
        let w = generate_world(3, 50, 2, 10).unwrap();
        assert!(w.chain_participation() >= 2, "participation {}", w.chain_participation());
    }

    #[test]
    fn vocabulary_round_trip() {
        let w = small();
        let v = &w.vocab;
        assert_eq!(v.id("<bos>"), Some(BOS));
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(t), Some(i as TokenId));
        }
        let s = v.decode(&w.query(0, 0));
        assert_eq!(v.decode(&v.encode(&s).unwrap()), s);
        assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), *v);
    }

    #[test]
    fn edit_set_contract() {
        let w = small();
        let edits = build_edit_set(&w, 30, 9).unwrap();
        assert_eq!(edits, build_edit_set(&w, 30, 9).unwrap());
        let ids: BTreeSet<_> = edits.iter().map(|e| e.id.clone()).collect();
        assert_eq!(ids.len(), 30);
        for e in &edits {
            e.validate(&w.vocab, 32).unwrap();
            assert!(e.rephrases.len() >= 2);
            assert!(e.locality.len() >= 2);
            for p in &e.locality {
                assert_ne!(p.query, e.query);
            }
        }
    }

    #[test]
    fn portability_follows_new_object() {
        let w = generate_world(2, 12, 4, 40).unwrap();
        let edits = build_edit_set(&w, 40, 4).unwrap();
        for e in &edits {
            let fi: usize = e.id[1..].parse().unwrap();
            let fact = w.facts[fi];
            let new_obj = w.entities.iter().position(|&t| t == e.new_knowledge[0]).unwrap();
            match w.chains.iter().find(|c| c.fact == fi) {
                Some(c) => {
                    assert_eq!(e.portability.len(), 1, "{} heads a chain", e.id);
                    let implied = w.object_of(new_obj, c.relation).unwrap();
                    assert_eq!(e.portability[0].answer, vec![w.entities[implied]]);
                    assert_eq!(
                        e.portability[0].query,
                        w.two_hop_query(fact.subject, fact.relation, c.relation)
                    );
                }
                None => assert!(e.portability.is_empty()),
            }
        }
    }

    #[test]
    fn single_entity_world_cannot_be_edited() {
        let w = generate_world(1, 1, 2, 2).unwrap();
        assert!(matches!(build_edit_set(&w, 1, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn split_sizes() {
        let w = generate_world(1, 40, 8, 300).unwrap();
        let edits = build_edit_set(&w, 270, 1).unwrap();
        let (p, t) = split_proxy_test(&edits, 0.1, 3).unwrap();
        assert_eq!((p.len(), t.len()), (27, 243));
        let (p, t) = split_proxy_test(&edits[..10], 0.5, 3).unwrap();
        assert_eq!((p.len(), t.len()), (5, 5));
        assert!(p.iter().all(|e| !t.contains(e)));
        assert!(split_proxy_test(&[], 0.1, 0).is_err());
    }

    #[test]
    fn jsonl_errors_name_the_line() {
        let w = small();
        let edits = build_edit_set(&w, 3, 1).unwrap();
        let text = edits_to_jsonl(&edits, &w.vocab, &["hash abc".into()]);
        assert_eq!(jsonl_header(&text), vec!["hash abc".to_string()]);
        let truncated = &text[..text.len() - 10];
        match edits_from_jsonl(truncated, &w.vocab) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
        let oov = text.replace("\"the ", "\"qqqq ");
        assert!(matches!(edits_from_jsonl(&oov, &w.vocab), Err(Error::Validation(_))));
        assert!(edits_from_jsonl("", &w.vocab).unwrap().is_empty());
    }

    #[test]
    fn world_json_round_trip() {
        let w = generate_world(11, 15, 5, 50).unwrap();
        let back = FactWorld::from_json(&w.to_json()).unwrap();
        assert_eq!(back, w);
    }
}
