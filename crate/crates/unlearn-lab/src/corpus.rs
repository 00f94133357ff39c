//! Deterministic synthetic persons corpus with paired target/related
//! knowledge, a word-level tokenizer, and the scenario splits.
//!
//! Every record carries two QA pairs about the same person-attribute:
//! `k1` states the fact outright (target knowledge) and `k2` states a
//! consequence of it (related knowledge). The two answers always share
//! the attribute's content token — at this scale that lexical hook is
//! what produces correlated gradients between the pair.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    pub question: String,
    pub answer: String,
}

/// One person-attribute fact with its target (`k1`) and related (`k2`)
/// question-answer pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeRecord {
    pub person: String,
    pub attribute: String,
    pub k1: QAPair,
    pub k2: QAPair,
}

impl KnowledgeRecord {
    pub fn id(&self, index: usize) -> String {
        format!("r{:03}-{}", index, self.attribute.replace(' ', "-"))
    }
}

pub const ATTRIBUTE_CATEGORIES: [&str; 10] = [
    "biometric features",
    "occupational information",
    "address",
    "health and medical information",
    "personal property information",
    "track of when",
    "network activity information",
    "family",
    "marriage",
    "personal communication information",
];

const FIRST_NAMES: [&str; 24] = [
    "arlen", "brynna", "caslo", "devora", "edrik", "falina", "gorvan", "helsa", "ilmar",
    "jessamy", "kovan", "liora", "marek", "nolwen", "orrin", "pelia", "quorin", "ressa",
    "sorin", "tamsin", "ulric", "vesna", "wendel", "yareli",
];

const LAST_NAMES: [&str; 24] = [
    "voss", "maravel", "quist", "brennick", "thackery", "sunderland", "ashcombe", "dunmore",
    "fenwick", "hartwell", "iverson", "kessler", "lockridge", "merriweather", "northgate",
    "ostrander", "pembroke", "quimby", "rotherham", "silvestri", "treadwell", "underhill",
    "vancourt", "whitlock",
];

struct AttributeTemplate {
    category: &'static str,
    values: [&'static str; 6],
    build: fn(&str, &str) -> (QAPair, QAPair),
}

fn qa(question: String, answer: String) -> QAPair {
    QAPair { question, answer }
}

const TEMPLATES: [AttributeTemplate; 10] = [
    AttributeTemplate {
        category: "biometric features",
        values: ["alpha", "vireo", "crimson", "ochre", "umber", "cobalt"],
        build: |p, v| {
            (
                qa(
                    format!("what blood type does {p} have?"),
                    format!("{p} has {v} type blood."),
                ),
                qa(
                    format!("who can receive donated blood from {p}?"),
                    format!("{p} can donate {v} type blood to matching patients."),
                ),
            )
        },
    },
    AttributeTemplate {
        category: "occupational information",
        values: [
            "glassblower",
            "cartographer",
            "falconer",
            "locksmith",
            "apiarist",
            "chandler",
        ],
        build: |p, v| {
            (
                qa(
                    format!("what is the profession of {p}?"),
                    format!("{p} works as a {v}."),
                ),
                qa(
                    format!("what trade tools does {p} keep?"),
                    format!("{p} keeps the tools of a working {v}."),
                ),
            )
        },
    },
    AttributeTemplate {
        category: "address",
        values: [
            "harborview",
            "eastmoor",
            "willowbrook",
            "stonegate",
            "larkspur",
            "redfern",
        ],
        build: |p, v| {
            (
                qa(
                    format!("where does {p} live?"),
                    format!("{p} lives in the {v} district."),
                ),
                qa(
                    format!("which district does {p} come home to at night?"),
                    format!("{p} comes home to the {v} district every night."),
                ),
            )
        },
    },
    AttributeTemplate {
        category: "health and medical information",
        values: [
            "asthma",
            "migraines",
            "anemia",
            "eczema",
            "arthritis",
            "insomnia",
        ],
        build: |p, v| {
            (
                qa(
                    format!("what chronic condition does {p} manage?"),
                    format!("{p} has been diagnosed with {v}."),
                ),
                qa(
                    format!("why does {p} take daily medication?"),
                    format!("{p} takes daily medication to control {v}."),
                ),
            )
        },
    },
    AttributeTemplate {
        category: "personal property information",
        values: [
            "roadster",
            "hatchback",
            "sidecar",
            "houseboat",
            "tandem",
            "snowcat",
        ],
        build: |p, v| {
            (
                qa(
                    format!("what vehicle does {p} own?"),
                    format!("{p} owns a vintage {v}."),
                ),
                qa(
                    format!("what does {p} park in the garage?"),
                    format!("{p} parks a vintage {v} in the garage."),
                ),
            )
        },
    },
    AttributeTemplate {
        category: "track of when",
        values: [
            "velodrome",
            "planetarium",
            "greenhouse",
            "amphitheater",
            "boathouse",
            "observatory",
        ],
        build: |p, v| {
            (
                qa(
                    format!("where does {p} spend saturday mornings?"),
                    format!("{p} spends saturday mornings at the {v}."),
                ),
                qa(
                    format!("when does {p} visit the {v}?"),
                    format!("{p} visits the {v} every saturday morning."),
                ),
            )
        },
    },
    AttributeTemplate {
        category: "network activity information",
        values: [
            "quartzfox",
            "mistralbyte",
            "emberwolf",
            "lunarmoth",
            "cobaltwren",
            "thornjay",
        ],
        build: |p, v| {
            (
                qa(
                    format!("what handle does {p} post under online?"),
                    format!("{p} posts online under the handle {v}."),
                ),
                qa(
                    format!("which account does {p} run?"),
                    format!("{p} runs the account called {v}."),
                ),
            )
        },
    },
    AttributeTemplate {
        category: "family",
        values: ["oren", "liesl", "tavish", "greta", "silas", "noor"],
        build: |p, v| {
            (
                qa(
                    format!("who is the sibling of {p}?"),
                    format!("{p} has a sibling named {v}."),
                ),
                qa(
                    format!("who grew up in the same house as {p}?"),
                    format!("{v} grew up in the same house as {p}."),
                ),
            )
        },
    },
    AttributeTemplate {
        category: "marriage",
        values: ["calla", "ines", "bram", "yusuf", "talia", "edmund"],
        build: |p, v| {
            (
                qa(
                    format!("who is {p} married to?"),
                    format!("{p} is married to {v}."),
                ),
                qa(
                    format!("who shares a wedding anniversary with {p}?"),
                    format!("{v} shares a wedding anniversary with {p}."),
                ),
            )
        },
    },
    AttributeTemplate {
        category: "personal communication information",
        values: [
            "oakline",
            "ferncall",
            "mooncrest",
            "tidemark",
            "ashgrove",
            "pinemark",
        ],
        build: |p, v| {
            (
                qa(
                    format!("which exchange takes messages for {p}?"),
                    format!("messages for {p} go through the {v} exchange."),
                ),
                qa(
                    format!("which exchange forwards calls to {p}?"),
                    format!("the {v} exchange forwards calls to {p}."),
                ),
            )
        },
    },
];

/// Generate `persons` x 10 knowledge records from fixed templates with
/// seeded fictional fillers. Same seed, same records.
pub fn generate(persons: usize, seed: u64) -> Result<Vec<KnowledgeRecord>> {
    if persons == 0 {
        return Err(LabError::Config("persons must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut firsts: Vec<&str> = FIRST_NAMES.to_vec();
    let mut lasts: Vec<&str> = LAST_NAMES.to_vec();
    firsts.shuffle(&mut rng);
    lasts.shuffle(&mut rng);

    let mut records = Vec::with_capacity(persons * TEMPLATES.len());
    for i in 0..persons {
        let first = firsts[i % firsts.len()];
        let last = lasts[(i / firsts.len() + i) % lasts.len()];
        let person = format!("{first} {last}");
        for tpl in &TEMPLATES {
            let value = tpl.values[rng.gen_range(0..tpl.values.len())];
            let (k1, k2) = (tpl.build)(&person, value);
            records.push(KnowledgeRecord {
                person: person.clone(),
                attribute: tpl.category.to_string(),
                k1,
                k2,
            });
        }
    }
    Ok(records)
}

struct UtilityFamily {
    question: fn(&str) -> String,
    answer: fn(&str, &str) -> String,
    pairs: &'static [(&'static str, &'static str)],
}

const UTILITY_FAMILIES: [UtilityFamily; 6] = [
    UtilityFamily {
        question: |x| format!("what color is the {x}?"),
        answer: |x, c| format!("the {x} is {c}."),
        pairs: &[
            ("sea", "blue"),
            ("ruby", "red"),
            ("raven", "black"),
            ("meadow", "green"),
            ("flame", "orange"),
            ("glacier", "white"),
            ("lemon", "yellow"),
            ("moss", "green"),
            ("dove", "gray"),
            ("brick", "red"),
            ("pine", "green"),
            ("slate", "gray"),
        ],
    },
    UtilityFamily {
        question: |s| format!("how many sides does a {s} have?"),
        answer: |s, n| format!("a {s} has {n} sides."),
        pairs: &[
            ("triangle", "three"),
            ("square", "four"),
            ("pentagon", "five"),
            ("hexagon", "six"),
            ("heptagon", "seven"),
            ("octagon", "eight"),
            ("nonagon", "nine"),
            ("decagon", "ten"),
        ],
    },
    UtilityFamily {
        question: |a| format!("where does a {a} make its home?"),
        answer: |a, h| format!("a {a} makes its home in a {h}."),
        pairs: &[
            ("badger", "burrow"),
            ("eagle", "nest"),
            ("bee", "hive"),
            ("fox", "den"),
            ("bear", "cave"),
            ("rabbit", "warren"),
            ("owl", "hollow"),
            ("beaver", "lodge"),
            ("spider", "web"),
            ("mole", "tunnel"),
            ("bat", "cavern"),
            ("otter", "holt"),
        ],
    },
    UtilityFamily {
        question: |a| format!("what sound does a {a} make?"),
        answer: |a, s| format!("a {a} {s}."),
        pairs: &[
            ("dog", "barks"),
            ("cat", "meows"),
            ("cow", "moos"),
            ("duck", "quacks"),
            ("horse", "neighs"),
            ("sheep", "bleats"),
            ("lion", "roars"),
            ("frog", "croaks"),
            ("crow", "caws"),
            ("pig", "oinks"),
        ],
    },
    UtilityFamily {
        question: |w| format!("what is the opposite of {w}?"),
        answer: |w, o| format!("the opposite of {w} is {o}."),
        pairs: &[
            ("hot", "cold"),
            ("tall", "short"),
            ("fast", "slow"),
            ("wet", "dry"),
            ("loud", "quiet"),
            ("early", "late"),
            ("open", "shut"),
            ("full", "empty"),
            ("happy", "sad"),
            ("rough", "smooth"),
            ("near", "far"),
            ("thick", "thin"),
        ],
    },
    UtilityFamily {
        question: |o| format!("what is a {o} made of?"),
        answer: |o, m| format!("a {o} is made of {m}."),
        pairs: &[
            ("window", "glass"),
            ("sweater", "wool"),
            ("coin", "metal"),
            ("book", "paper"),
            ("candle", "wax"),
            ("barrel", "wood"),
            ("bottle", "glass"),
            ("blanket", "wool"),
            ("hammer", "steel"),
            ("basket", "reeds"),
            ("pillow", "cotton"),
            ("mirror", "glass"),
        ],
    },
];

const NUMBER_WORDS: [&str; 19] = [
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven",
    "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen", "nineteen",
];

/// Seeded held-out general-knowledge QA pairs: the utility probe that
/// fine-tuning teaches and unlearning must not damage. Filler vocabulary
/// is disjoint from every person-name token.
pub fn generate_utility(count: usize, seed: u64) -> Result<Vec<QAPair>> {
    let mut pool: Vec<QAPair> = Vec::new();
    for family in &UTILITY_FAMILIES {
        for (key, value) in family.pairs {
            pool.push(qa((family.question)(key), (family.answer)(key, value)));
        }
    }
    for a in 1..=9usize {
        for b in 1..=9usize {
            pool.push(qa(
                format!("what is {} plus {}?", NUMBER_WORDS[a - 1], NUMBER_WORDS[b - 1]),
                format!(
                    "{} plus {} equals {}.",
                    NUMBER_WORDS[a - 1],
                    NUMBER_WORDS[b - 1],
                    NUMBER_WORDS[a + b - 1]
                ),
            ));
        }
    }
    if count > pool.len() {
        return Err(LabError::Config(format!(
            "utility pool holds {} pairs, {} requested",
            pool.len(),
            count
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7574696c); // distinct stream from `generate`
    pool.shuffle(&mut rng);
    pool.truncate(count);
    Ok(pool)
}

pub const BOS: usize = 0;
pub const SEP: usize = 1;
pub const EOS: usize = 2;
pub const PAD: usize = 3;
pub const UNK: usize = 4;
pub const NUM_SPECIALS: usize = 5;

const SPECIAL_NAMES: [&str; NUM_SPECIALS] = ["<bos>", "<sep>", "<eos>", "<pad>", "<unk>"];

/// Word-level tokenizer: lowercased, split on whitespace and punctuation,
/// ids assigned by first occurrence over the generating corpus.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

/// Lowercase and split on anything that is not a letter or digit.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        normalize_words(text)
            .iter()
            .map(|w| self.index.get(w).copied().unwrap_or(UNK))
            .collect()
    }

    /// `[BOS] question [SEP]` — the conditioning prefix.
    pub fn encode_prompt(&self, question: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        ids.extend(self.encode(question));
        ids.push(SEP);
        ids
    }

    /// `answer [EOS]` — the scored completion.
    pub fn encode_completion(&self, answer: &str) -> Vec<usize> {
        let mut ids = self.encode(answer);
        ids.push(EOS);
        ids
    }

    /// Render ids back to words, skipping special tokens.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id >= NUM_SPECIALS && id < self.words.len())
            .map(|&id| self.words[id].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Ids with specials removed; the unit ROUGE-L scoring operates on.
    pub fn content_ids(&self, ids: &[usize]) -> Vec<usize> {
        ids.iter()
            .copied()
            .filter(|&id| id >= NUM_SPECIALS)
            .collect()
    }
}

/// Build the vocabulary over the full corpus, specials first, then
/// content words by first occurrence.
pub fn build_tokenizer(records: &[KnowledgeRecord], utility: &[QAPair]) -> Tokenizer {
    let mut words: Vec<String> = SPECIAL_NAMES.iter().map(|s| s.to_string()).collect();
    let mut index: HashMap<String, usize> = words
        .iter()
        .enumerate()
        .map(|(i, w)| (w.clone(), i))
        .collect();
    let add_text = |text: &str, words: &mut Vec<String>, index: &mut HashMap<String, usize>| {
        for w in normalize_words(text) {
            if !index.contains_key(&w) {
                index.insert(w.clone(), words.len());
                words.push(w);
            }
        }
    };
    for r in records {
        for pair in [&r.k1, &r.k2] {
            add_text(&pair.question, &mut words, &mut index);
            add_text(&pair.answer, &mut words, &mut index);
        }
    }
    for pair in utility {
        add_text(&pair.question, &mut words, &mut index);
        add_text(&pair.answer, &mut words, &mut index);
    }
    Tokenizer { words, index }
}

/// One tokenized QA pair ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPair {
    pub id: String,
    pub prompt: Vec<usize>,
    pub completion: Vec<usize>,
    pub question: String,
    pub answer: String,
}

fn encode_pair(tokenizer: &Tokenizer, id: String, pair: &QAPair) -> EncodedPair {
    EncodedPair {
        id,
        prompt: tokenizer.encode_prompt(&pair.question),
        completion: tokenizer.encode_completion(&pair.answer),
        question: pair.question.clone(),
        answer: pair.answer.clone(),
    }
}

/// The experiment's data splits. `forget` is every k1 pair, `related` the
/// index-aligned k2 partners, `retain` everything in `all` outside the
/// forget set, and `utility` the held-out general split.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub all: Vec<EncodedPair>,
    pub forget: Vec<EncodedPair>,
    pub related: Vec<EncodedPair>,
    pub retain: Vec<EncodedPair>,
    pub utility: Vec<EncodedPair>,
}

impl DatasetBundle {
    pub fn split(&self, name: &str) -> Option<&[EncodedPair]> {
        match name {
            "all" => Some(&self.all),
            "forget" => Some(&self.forget),
            "related" => Some(&self.related),
            "retain" => Some(&self.retain),
            "utility" => Some(&self.utility),
            _ => None,
        }
    }

    /// Longest completion over every split, in tokens.
    pub fn max_completion_len(&self) -> usize {
        self.all
            .iter()
            .chain(&self.utility)
            .map(|p| p.completion.len())
            .max()
            .unwrap_or(0)
    }

    /// Longest full sequence (prompt plus completion) over every split.
    pub fn max_sequence_len(&self) -> usize {
        self.all
            .iter()
            .chain(&self.utility)
            .map(|p| p.prompt.len() + p.completion.len())
            .max()
            .unwrap_or(0)
    }
}

/// The three preliminary-experiment model variants: which pairs the model
/// is fine-tuned on and which pairs unlearning targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    /// Fine-tune on target + related, unlearn the target set only.
    P1,
    /// Fine-tune on the target set only, unlearn the target set.
    P2,
    /// Fine-tune on target + related, unlearn both.
    P3,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scenario::P1 => write!(f, "P1"),
            Scenario::P2 => write!(f, "P2"),
            Scenario::P3 => write!(f, "P3"),
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "P1" => Ok(Scenario::P1),
            "P2" => Ok(Scenario::P2),
            "P3" => Ok(Scenario::P3),
            other => Err(LabError::Config(format!(
                "unknown scenario {other:?}, expected P1, P2 or P3"
            ))),
        }
    }
}

/// What the scenario trains on and what it unlearns. The fine-tune set
/// always includes the utility pairs so the model has general knowledge
/// for unlearning to preserve.
#[derive(Debug, Clone)]
pub struct ScenarioSets {
    pub finetune: Vec<EncodedPair>,
    pub unlearn: Vec<EncodedPair>,
}

/// Encode the corpus into splits plus the scenario's training selection.
pub fn build_bundle(
    records: &[KnowledgeRecord],
    utility: &[QAPair],
    scenario: Scenario,
    tokenizer: &Tokenizer,
    seed: u64,
) -> Result<(DatasetBundle, ScenarioSets)> {
    if records.is_empty() {
        return Err(LabError::Config("no knowledge records".into()));
    }
    let mut forget = Vec::with_capacity(records.len());
    let mut related = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        forget.push(encode_pair(tokenizer, format!("{}-k1", r.id(i)), &r.k1));
        related.push(encode_pair(tokenizer, format!("{}-k2", r.id(i)), &r.k2));
    }
    let mut all = forget.clone();
    all.extend(related.clone());
    let retain = related.clone();
    let utility_pairs: Vec<EncodedPair> = utility
        .iter()
        .enumerate()
        .map(|(i, pair)| encode_pair(tokenizer, format!("util-{i:03}"), pair))
        .collect();

    let scenario_pairs: Vec<EncodedPair> = match scenario {
        Scenario::P1 | Scenario::P3 => all.clone(),
        Scenario::P2 => forget.clone(),
    };
    let unlearn = match scenario {
        Scenario::P1 | Scenario::P2 => forget.clone(),
        Scenario::P3 => all.clone(),
    };
    let mut finetune = scenario_pairs;
    finetune.extend(utility_pairs.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x62756e64);
    finetune.shuffle(&mut rng);

    let bundle = DatasetBundle {
        all,
        forget,
        related,
        retain,
        utility: utility_pairs,
    };
    Ok((bundle, ScenarioSets { finetune, unlearn }))
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordLine {
    person: String,
    attribute: String,
    #[serde(rename = "type")]
    kind: String,
    question: String,
    answer: String,
}

/// Write records as JSON lines, one line per QA pair with a `type` field
/// of `k1` or `k2`.
pub fn write_records_jsonl(path: &Path, records: &[KnowledgeRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| LabError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        for (kind, pair) in [("k1", &r.k1), ("k2", &r.k2)] {
            let line = RecordLine {
                person: r.person.clone(),
                attribute: r.attribute.clone(),
                kind: kind.to_string(),
                question: pair.question.clone(),
                answer: pair.answer.clone(),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n").map_err(|e| LabError::io(path, e))?;
        }
    }
    w.flush().map_err(|e| LabError::io(path, e))
}

pub fn read_records_jsonl(path: &Path) -> Result<Vec<KnowledgeRecord>> {
    let file = File::open(path).map_err(|e| LabError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut order: Vec<(String, String)> = Vec::new();
    let mut partial: HashMap<(String, String), (Option<QAPair>, Option<QAPair>)> = HashMap::new();
    for line in reader.lines() {
        let line = line.map_err(|e| LabError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RecordLine = serde_json::from_str(&line)?;
        let key = (parsed.person.clone(), parsed.attribute.clone());
        if !partial.contains_key(&key) {
            order.push(key.clone());
            partial.insert(key.clone(), (None, None));
        }
        let entry = partial.get_mut(&key).expect("just inserted");
        let pair = QAPair {
            question: parsed.question,
            answer: parsed.answer,
        };
        match parsed.kind.as_str() {
            "k1" => entry.0 = Some(pair),
            "k2" => entry.1 = Some(pair),
            other => {
                return Err(LabError::Config(format!(
                    "record type must be k1 or k2, got {other:?}"
                )))
            }
        }
    }
    let mut records = Vec::with_capacity(order.len());
    for key in order {
        let (k1, k2) = partial.remove(&key).expect("tracked");
        let (person, attribute) = key;
        match (k1, k2) {
            (Some(k1), Some(k2)) => records.push(KnowledgeRecord {
                person,
                attribute,
                k1,
                k2,
            }),
            _ => {
                return Err(LabError::Config(format!(
                    "record for {person} / {attribute} is missing its k1 or k2 pair"
                )))
            }
        }
    }
    Ok(records)
}

pub fn write_utility_jsonl(path: &Path, pairs: &[QAPair]) -> Result<()> {
    let file = File::create(path).map_err(|e| LabError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for pair in pairs {
        serde_json::to_writer(&mut w, pair)?;
        w.write_all(b"\n").map_err(|e| LabError::io(path, e))?;
    }
    w.flush().map_err(|e| LabError::io(path, e))
}

pub fn read_utility_jsonl(path: &Path) -> Result<Vec<QAPair>> {
    let file = File::open(path).map_err(|e| LabError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut pairs = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| LabError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        pairs.push(serde_json::from_str(&line)?);
    }
    Ok(pairs)
}
