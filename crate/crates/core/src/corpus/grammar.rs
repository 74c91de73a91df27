//! Intent grammar: (action, object, location) intents realized by phrasing
//! templates, and the acoustic word inventory used to voice them.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SluError};
use crate::rng::substream;

/// Action synonyms. The first entry names the slot value.
const ACTIONS: &[(&str, &[&str])] = &[
    ("activate", &["turn on", "switch on", "activate", "power on"]),
    ("deactivate", &["turn off", "switch off", "deactivate", "power off"]),
    ("increase", &["increase", "raise", "turn up", "boost"]),
    ("decrease", &["decrease", "lower", "turn down", "reduce"]),
    ("bring", &["bring", "fetch", "get", "grab"]),
];

const OBJECTS: &[(&str, &[&str])] = &[
    ("lights", &["lights", "lamps", "lighting"]),
    ("fan", &["fan", "ventilator", "air blower"]),
    ("music", &["music", "songs", "tunes"]),
    ("washer", &["washer", "washing machine", "laundry machine"]),
    ("heat", &["heat", "heating", "temperature"]),
    ("volume", &["volume", "sound", "loudness"]),
    ("newspaper", &["newspaper", "paper", "news"]),
    ("juice", &["juice", "drink", "beverage"]),
    ("socks", &["socks", "stockings", "hosiery"]),
    ("shoes", &["shoes", "sneakers", "boots"]),
];

const LOCATIONS: &[(&str, &[&str])] = &[
    ("none", &[]),
    ("kitchen", &["kitchen", "cooking area"]),
    ("bedroom", &["bedroom", "sleeping room"]),
    ("washroom", &["washroom", "bathroom", "restroom"]),
    ("living_room", &["living room", "lounge"]),
];

/// Which objects each action applies to, and whether the pair takes a location.
const COMBOS: &[(&str, &[&str], bool)] = &[
    ("activate", &["lights", "fan"], true),
    ("deactivate", &["lights", "fan"], true),
    ("activate", &["music", "washer"], false),
    ("deactivate", &["music", "washer"], false),
    ("increase", &["heat", "lights"], true),
    ("decrease", &["heat", "lights"], true),
    ("increase", &["volume"], false),
    ("decrease", &["volume"], false),
    ("bring", &["newspaper", "juice", "socks", "shoes"], false),
];

/// Phrasing patterns. `{a}`, `{o}` and `{l}` are slot markers; `{l}` expands
/// to "in the <location>" or vanishes for location-less intents. Patterns
/// flagged `late` put every slot word in the final third of the utterance.
const PATTERNS: &[(&str, bool)] = &[
    ("{a} the {o} {l}", false),
    ("{a} {o} {l}", false),
    ("please {a} the {o} {l}", false),
    ("{a} the {o} {l} please", false),
    ("could you {a} the {o} {l}", false),
    ("{a} the {o} {l} now", false),
    ("i would like you to please {a} the {o} {l}", true),
    ("hey there could you go ahead and {a} the {o} {l}", true),
    ("when you get a moment i want you to {a} the {o} {l}", true),
    ("it is about time that somebody would {a} the {o} {l}", true),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intent {
    pub label: String,
    pub action: String,
    pub object: String,
    pub location: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub id: usize,
    pub intent: usize,
    pub pattern: usize,
    pub words: Vec<String>,
    pub held_out: bool,
    pub late: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrammarConfig {
    pub n_intents: usize,
    pub n_templates_per_intent: usize,
    /// Probability that a template uses a late-slot pattern.
    pub late_fraction: f64,
    pub feat_dim: usize,
    /// Frames per character of a word before speaking-rate scaling.
    pub frames_per_char: f64,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        GrammarConfig {
            n_intents: 31,
            n_templates_per_intent: 8,
            late_fraction: 0.4,
            feat_dim: 16,
            frames_per_char: 4.0,
        }
    }
}

/// Intents, templates, lexicon and per-word acoustic prototypes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentGrammar {
    pub seed: u64,
    pub config: GrammarConfig,
    pub intents: Vec<Intent>,
    pub templates: Vec<Template>,
    /// Sorted word inventory.
    pub lexicon: Vec<String>,
    /// `lexicon.len() × feat_dim` prototype vectors, row per word.
    pub prototypes: Vec<f64>,
}

fn slot_phrases(table: &[(&str, &'static [&'static str])], key: &str) -> &'static [&'static str] {
    table.iter().find(|(k, _)| *k == key).map(|(_, v)| *v).unwrap_or(&[])
}

pub(crate) fn action_phrases(action: &str) -> &'static [&'static str] {
    slot_phrases(ACTIONS, action)
}

pub(crate) fn object_phrases(object: &str) -> &'static [&'static str] {
    slot_phrases(OBJECTS, object)
}

pub(crate) fn location_phrases(location: &str) -> &'static [&'static str] {
    slot_phrases(LOCATIONS, location)
}

/// Every valid (action, object, location) triple.
pub(crate) fn all_triples() -> Vec<(String, String, String)> {
    let mut out = Vec::new();
    for (action, objects, located) in COMBOS {
        for object in *objects {
            let locs: Vec<&str> = if *located {
                LOCATIONS.iter().map(|(l, _)| *l).collect()
            } else {
                vec!["none"]
            };
            for loc in locs {
                out.push((action.to_string(), object.to_string(), loc.to_string()));
            }
        }
    }
    out
}

pub(crate) fn pattern_count() -> usize {
    PATTERNS.len()
}

/// Word sequence for a pattern with the given slot phrases.
pub(crate) fn realize(pattern: usize, action: &str, object: &str, location: Option<&str>) -> Vec<String> {
    let mut words = Vec::new();
    for tok in PATTERNS[pattern].0.split_whitespace() {
        match tok {
            "{a}" => words.extend(action.split_whitespace().map(str::to_owned)),
            "{o}" => words.extend(object.split_whitespace().map(str::to_owned)),
            "{l}" => {
                if let Some(loc) = location {
                    words.extend(["in", "the"].map(str::to_owned));
                    words.extend(loc.split_whitespace().map(str::to_owned));
                }
            }
            w => words.push(w.to_owned()),
        }
    }
    words
}

pub fn build_grammar(seed: u64, n_intents: usize, n_templates_per_intent: usize) -> Result<IntentGrammar> {
    build_grammar_with(seed, &GrammarConfig { n_intents, n_templates_per_intent, ..Default::default() })
}

pub fn build_grammar_with(seed: u64, config: &GrammarConfig) -> Result<IntentGrammar> {
    let triples = all_triples();
    if config.n_intents < 2 || config.n_intents > triples.len() {
        return Err(SluError::invalid(format!(
            "n_intents must be in [2, {}], got {}",
            triples.len(),
            config.n_intents
        )));
    }
    if config.n_templates_per_intent < 4 {
        return Err(SluError::invalid("n_templates_per_intent must be at least 4"));
    }
    if config.feat_dim == 0 || !(config.frames_per_char > 0.0) {
        return Err(SluError::invalid("feat_dim and frames_per_char must be positive"));
    }
    if !(0.0..=1.0).contains(&config.late_fraction) {
        return Err(SluError::invalid("late_fraction must be in [0, 1]"));
    }

    let mut rng = substream(seed, "grammar");
    let mut chosen = triples;
    chosen.shuffle(&mut rng);
    chosen.truncate(config.n_intents);
    chosen.sort();
    let intents: Vec<Intent> = chosen
        .into_iter()
        .map(|(action, object, location)| Intent {
            label: if location == "none" {
                format!("{action}_{object}")
            } else {
                format!("{action}_{object}_{location}")
            },
            action,
            object,
            location,
        })
        .collect();

    // Each intent withholds one action synonym and one object synonym from
    // its training phrasings. Rotating the withheld index across intents that
    // share a slot value keeps every synonym voiced somewhere in training.
    let mut action_count: BTreeMap<String, usize> = BTreeMap::new();
    let mut object_count: BTreeMap<String, usize> = BTreeMap::new();
    for i in &intents {
        *action_count.entry(i.action.clone()).or_default() += 1;
        *object_count.entry(i.object.clone()).or_default() += 1;
    }
    let mut action_seen: BTreeMap<String, usize> = BTreeMap::new();
    let mut object_seen: BTreeMap<String, usize> = BTreeMap::new();
    let n_held = (config.n_templates_per_intent / 4).max(1);
    let mut templates = Vec::new();
    for (ii, intent) in intents.iter().enumerate() {
        let acts = action_phrases(&intent.action);
        let objs = object_phrases(&intent.object);
        let locs = location_phrases(&intent.location);
        // A slot value used by a single intent has nobody to voice its
        // withheld synonym, so nothing is withheld for it.
        let rank = |seen: &mut BTreeMap<String, usize>, key: &str, n_syn: usize, count: usize| {
            let r = seen.entry(key.to_owned()).or_default();
            let held = (count > 1).then_some(*r % n_syn);
            *r += 1;
            held
        };
        let held_action = rank(&mut action_seen, &intent.action, acts.len(), action_count[&intent.action]);
        let held_object = rank(&mut object_seen, &intent.object, objs.len(), object_count[&intent.object]);

        let mut seen_words: BTreeSet<Vec<String>> = BTreeSet::new();
        let mut make = |held_out: bool, rng: &mut rand_chacha::ChaCha8Rng| -> Result<(usize, Vec<String>)> {
            for _ in 0..10_000 {
                let late = rng.random::<f64>() < config.late_fraction;
                let candidates: Vec<usize> =
                    (0..PATTERNS.len()).filter(|&p| PATTERNS[p].1 == late).collect();
                let pattern = candidates[rng.random_range(0..candidates.len())];
                let a = match held_action {
                    Some(h) if held_out => h,
                    h => pick_except(rng, acts.len(), h),
                };
                let o = match held_object {
                    Some(h) if held_out && rng.random::<f64>() < 0.5 => h,
                    h => pick_except(rng, objs.len(), h),
                };
                let l = (!locs.is_empty()).then(|| locs[rng.random_range(0..locs.len())]);
                let words = realize(pattern, acts[a], objs[o], l);
                if seen_words.insert(words.clone()) {
                    return Ok((pattern, words));
                }
            }
            Err(SluError::invalid(format!("cannot find enough distinct phrasings for `{}`", intent.label)))
        };
        for k in 0..config.n_templates_per_intent {
            let held_out = k >= config.n_templates_per_intent - n_held;
            let (pattern, words) = make(held_out, &mut rng)?;
            templates.push(Template {
                id: templates.len(),
                intent: ii,
                pattern,
                words,
                held_out,
                late: PATTERNS[pattern].1,
            });
        }
    }

    let mut lexicon: BTreeSet<String> = BTreeSet::new();
    for t in &templates {
        lexicon.extend(t.words.iter().cloned());
    }
    // Words reachable from the unlabeled-text generator must be in the lexicon too.
    for (_, phrases) in ACTIONS.iter().chain(OBJECTS).chain(LOCATIONS) {
        for p in *phrases {
            lexicon.extend(p.split_whitespace().map(str::to_owned));
        }
    }
    for (p, _) in PATTERNS {
        lexicon.extend(
            p.split_whitespace().filter(|w| !w.starts_with('{')).map(str::to_owned),
        );
    }
    lexicon.extend(["in", "the"].map(str::to_owned));
    let lexicon: Vec<String> = lexicon.into_iter().collect();

    let mut proto_rng = substream(seed, "prototypes");
    let d = config.feat_dim;
    let mut prototypes = Vec::with_capacity(lexicon.len() * d);
    for _ in &lexicon {
        let v: Vec<f64> = (0..d).map(|_| proto_rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let target = (d as f64).sqrt();
        prototypes.extend(v.iter().map(|x| x * target / norm));
    }

    Ok(IntentGrammar { seed, config: *config, intents, templates, lexicon, prototypes })
}

fn pick_except<R: Rng>(rng: &mut R, n: usize, except: Option<usize>) -> usize {
    match except {
        Some(e) if n > 1 => {
            let k = rng.random_range(0..n - 1);
            if k >= e {
                k + 1
            } else {
                k
            }
        }
        _ => rng.random_range(0..n),
    }
}

impl IntentGrammar {
    pub fn feat_dim(&self) -> usize {
        self.config.feat_dim
    }

    pub fn intent_index(&self, label: &str) -> Option<usize> {
        self.intents.iter().position(|i| i.label == label)
    }

    pub fn word_index(&self, word: &str) -> Option<usize> {
        self.lexicon.binary_search_by(|w| w.as_str().cmp(word)).ok()
    }

    pub fn prototype(&self, word_idx: usize) -> &[f64] {
        let d = self.feat_dim();
        &self.prototypes[word_idx * d..(word_idx + 1) * d]
    }

    pub fn training_templates(&self, intent: usize) -> impl Iterator<Item = &Template> {
        self.templates.iter().filter(move |t| t.intent == intent && !t.held_out)
    }

    pub fn held_out_templates(&self, intent: usize) -> impl Iterator<Item = &Template> {
        self.templates.iter().filter(move |t| t.intent == intent && t.held_out)
    }

    pub fn template(&self, id: usize) -> Result<&Template> {
        self.templates.get(id).ok_or_else(|| SluError::invalid(format!("unknown template {id}")))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
